use std::path::PathBuf;

use clap::Args;
use refertok::encoder::{write_feature_map, VisionEncoder};
use refertok::geometry::resize_bilinear;
use refertok::io::Archive;
use refertok::tokenizer::{tokenize_object_traced, TokenizerTrace};

use super::{image_for, load_images};
use crate::objects::load_jobs;
use crate::{CliError, CliResult, Context};

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    /// Image shared by objects without per-frame images
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Object specification JSON
    #[arg(long)]
    pub objects: PathBuf,
    /// Tokens per object, overrides the config
    #[arg(long)]
    pub n: Option<usize>,
    /// Also write masked features before (`.pre.rtk`) and after (`.agg.rtk`) aggregation
    #[arg(long)]
    pub dump_pre_aggregation: bool,
    /// Also write the global feature map of --image as `vision.rtk`
    #[arg(long, requires = "image")]
    pub dump_vision: bool,
}

pub fn run(ctx: &Context, args: TokenizeArgs) -> CliResult<()> {
    let mut config = ctx.config.clone();
    if let Some(n) = args.n {
        config.tokenizer.n = n;
    }
    config.validate()?;
    let cfg = config.tokenizer_config();
    let weights = config.projection_weights()?;
    let encoder = config.encoder()?;

    let jobs = load_jobs(&args.objects)?;
    let images = load_images(&jobs, args.image.as_deref())?;
    let traces: Vec<TokenizerTrace> = refertok::par::try_map_slice(&jobs, |job| {
        let run = || -> refertok::Result<TokenizerTrace> {
            let image = &images[image_for(job, args.image.as_deref())?];
            let mask = job.mask.load()?;
            let mut t = tokenize_object_traced(
                image,
                &mask,
                &cfg,
                &weights,
                &encoder as &dyn VisionEncoder,
                &job.object_id,
            )?;
            t.output.timestamp = job.timestamp;
            Ok(t)
        };
        run().map_err(|e| CliError::in_job(&job.stem, e))
    })?;

    for (job, t) in jobs.iter().zip(&traces) {
        t.output
            .write(ctx.output(&format!("{}.tokens.rtk", job.stem))?)?;
        if args.dump_pre_aggregation {
            let mut pre = Archive::new();
            pre.push_f64(
                "tokens",
                &[t.fused.len(), t.fused.dim()],
                t.fused.as_slice(),
            )?;
            pre.write(ctx.output(&format!("{}.pre.rtk", job.stem))?)?;
            let c = &t.aggregation.centroids;
            let mut agg = Archive::new();
            agg.push_f64("tokens", &[c.len(), c.dim()], c.as_slice())?;
            agg.write(ctx.output(&format!("{}.agg.rtk", job.stem))?)?;
        }
    }
    if let (true, Some(path)) = (args.dump_vision, args.image.as_ref()) {
        let [gh, gw] = config.infusion.global_grid;
        let p = encoder.patch();
        let resized = resize_bilinear(&images[path.as_path()], gw * p.patch_w, gh * p.patch_h);
        write_feature_map(ctx.output("vision.rtk")?, &encoder.encode(&resized)?)?;
    }
    eprintln!(
        "tokenize: {} archive(s) of {} tokens in {}",
        jobs.len(),
        cfg.n,
        ctx.out_dir.display()
    );
    Ok(())
}
