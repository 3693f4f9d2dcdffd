use std::path::PathBuf;

use clap::Args;
use refertok::analysis::{histogram_csv, similarity_stats, SimilarityStats};
use refertok::io::Archive;
use refertok::tokenizer::read_tokens;
use serde::Serialize;

use crate::{write_text, CliResult, Context};

#[derive(Debug, Args)]
pub struct SimstatsArgs {
    /// Tokens before aggregation (e.g. `<stem>.pre.rtk`)
    pub before: PathBuf,
    /// Tokens after aggregation (e.g. `<stem>.agg.rtk`)
    pub after: PathBuf,
    /// Output name prefix inside --out-dir
    #[arg(long, default_value = "simstats")]
    pub name: String,
}

#[derive(Serialize)]
struct Report<'a> {
    before: &'a SimilarityStats,
    after: &'a SimilarityStats,
}

pub fn run(ctx: &Context, args: SimstatsArgs) -> CliResult<()> {
    let before = read_tokens(&Archive::read(&args.before)?)?;
    let after = read_tokens(&Archive::read(&args.after)?)?;
    let (b, a) = similarity_stats(&before, &after)?;
    write_text(
        &ctx.output(&format!("{}.csv", args.name))?,
        &histogram_csv(&b, &a),
    )?;
    let json = serde_json::to_string_pretty(&Report {
        before: &b,
        after: &a,
    })
    .map_err(refertok::Error::from)?
        + "\n";
    write_text(&ctx.output(&format!("{}.json", args.name))?, &json)?;
    eprintln!("simstats: mean cosine {:.4} -> {:.4}", b.mean, a.mean);
    Ok(())
}
