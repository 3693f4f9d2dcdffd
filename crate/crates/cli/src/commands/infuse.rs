use std::path::{Path, PathBuf};

use clap::Args;
use refertok::encoder::VisionEncoder;
use refertok::infusion::{infuse, FusedTokenSet};
use refertok::tokenizer::ObjectTokenSet;

use super::{image_for, load_images};
use crate::objects::{load_jobs, Job, MaskSource};
use crate::{CliError, CliResult, Context};

#[derive(Debug, Args)]
pub struct InfuseArgs {
    /// Image shared by objects without per-frame images
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Object specification JSON (the one given to `tokenize`)
    #[arg(long, conflicts_with_all = ["tokens", "mask"])]
    pub objects: Option<PathBuf>,
    /// Where `tokenize` left its archives (default: --out-dir)
    #[arg(long, requires = "objects")]
    pub tokens_dir: Option<PathBuf>,
    /// Token archive; pair each with a --mask, in order
    #[arg(long, requires = "mask")]
    pub tokens: Vec<PathBuf>,
    /// Mask of the matching --tokens archive
    #[arg(long, requires = "tokens")]
    pub mask: Vec<PathBuf>,
}

/// `a/cat.tokens.rtk` -> `cat`
fn stem_of(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = name.strip_suffix(".rtk").unwrap_or(&name);
    name.strip_suffix(".tokens").unwrap_or(name).to_string()
}

pub fn run(ctx: &Context, args: InfuseArgs) -> CliResult<()> {
    let config = &ctx.config;
    config.validate()?;
    let (jobs, archives): (Vec<Job>, Vec<PathBuf>) = match &args.objects {
        Some(spec) => {
            let dir = args.tokens_dir.as_deref().unwrap_or(&ctx.out_dir);
            let jobs = load_jobs(spec)?;
            let archives = jobs
                .iter()
                .map(|j| dir.join(format!("{}.tokens.rtk", j.stem)))
                .collect();
            (jobs, archives)
        }
        None => {
            if args.tokens.is_empty() || args.tokens.len() != args.mask.len() {
                return Err(CliError::Usage(
                    "give --objects, or matching --tokens/--mask pairs".into(),
                ));
            }
            let jobs = args
                .tokens
                .iter()
                .zip(&args.mask)
                .map(|(t, m)| Job {
                    object_id: String::new(),
                    timestamp: None,
                    mask: MaskSource::Path(m.clone()),
                    image: None,
                    stem: stem_of(t),
                })
                .collect();
            (jobs, args.tokens.clone())
        }
    };

    let encoder = config.encoder()?;
    let w_local = config.local_attention()?;
    let w_global = config.global_attention()?;
    let images = load_images(&jobs, args.image.as_deref())?;
    let items: Vec<(&Job, &PathBuf)> = jobs.iter().zip(&archives).collect();
    let fused: Vec<FusedTokenSet> = refertok::par::try_map_slice(&items, |(job, archive)| {
        let run = || -> refertok::Result<FusedTokenSet> {
            let tr = ObjectTokenSet::read(archive)?;
            let image = &images[image_for(job, args.image.as_deref())?];
            let mask = job.mask.load()?;
            infuse(
                &tr,
                image,
                &mask,
                &w_local,
                &w_global,
                &encoder as &dyn VisionEncoder,
                &config.infusion,
            )
        };
        run().map_err(|e| CliError::in_job(&job.stem, e))
    })?;

    for (job, f) in jobs.iter().zip(&fused) {
        f.write(ctx.output(&format!("{}.fused.rtk", job.stem))?)?;
    }
    eprintln!(
        "infuse: {} archive(s) in {}",
        fused.len(),
        ctx.out_dir.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems() {
        assert_eq!(stem_of(Path::new("out/cat.tokens.rtk")), "cat");
        assert_eq!(stem_of(Path::new("dog.f002.tokens.rtk")), "dog.f002");
        assert_eq!(stem_of(Path::new("x.rtk")), "x");
    }
}
