use std::path::PathBuf;

use clap::Args;
use refertok::encoder::FeatureMap;
use refertok::infusion::{assemble_sequence, timestamp_prefix, LayoutFragment};
use refertok::io::Archive;
use refertok::tokenizer::{read_tokens, sidecar_path};
use serde::Deserialize;

use crate::{write_text, CliError, CliResult, Context};

#[derive(Debug, Args)]
pub struct AssembleArgs {
    /// Object or fused token archives, in sequence order
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Length of the text segment
    #[arg(long)]
    pub text_len: usize,
    /// Global vision feature map (vision-object layouts only)
    #[arg(long)]
    pub vision: Option<PathBuf>,
    /// Output file name inside --out-dir
    #[arg(long, default_value = "layout.json")]
    pub output: String,
}

/// Fields shared by token and fused-token sidecars.
#[derive(Deserialize)]
struct Meta {
    object_id: String,
    timestamp: Option<f64>,
}

pub fn run(ctx: &Context, args: AssembleArgs) -> CliResult<()> {
    let framework = ctx.framework.ok_or_else(|| {
        CliError::Usage("assemble needs --framework vision-object|object-only".into())
    })?;
    let vision_path = args
        .vision
        .as_ref()
        .or(ctx.config.encoder.vision_features.as_ref());
    let vision_tokens = match vision_path {
        Some(p) => {
            let fm = FeatureMap::from_archive(&Archive::read(p)?)?;
            Some(fm.grid_h * fm.grid_w)
        }
        None => None,
    };

    let mut fragments = Vec::with_capacity(args.inputs.len());
    for path in &args.inputs {
        let tokens = read_tokens(&Archive::read(path)?)?;
        let meta: Meta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)
            .map_err(refertok::Error::from)?;
        let source = format!("{}@{}", meta.object_id, path.display());
        fragments.push(match meta.timestamp {
            Some(t) => timestamp_prefix(tokens.len(), tokens.dim(), t, source)?,
            None => LayoutFragment::object(tokens.len(), source),
        });
    }

    let layout = assemble_sequence(
        framework,
        vision_tokens,
        &fragments,
        args.text_len,
        ctx.config.sys_len,
    )?;
    write_text(&ctx.output(&args.output)?, &layout.to_json()?)?;
    eprintln!(
        "assemble: {} tokens -> {}",
        layout.total(),
        ctx.out_dir.join(&args.output).display()
    );
    Ok(())
}
