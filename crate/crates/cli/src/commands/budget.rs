use std::str::FromStr;

use clap::{Args, ValueEnum};
use refertok::budget::{
    compare_frameworks, csv_line, BudgetFramework, BudgetReport, ModelDims, TokenCounts, CSV_HEADER,
};
use refertok::infusion::Framework;
use serde::Serialize;

use crate::{write_text, CliResult, Context};

#[derive(Debug, Args)]
pub struct BudgetArgs {
    /// Model name (2B, 7B) or model-dims JSON path; overrides the config
    #[arg(long)]
    pub model: Option<String>,
    /// Object tokens
    #[arg(long = "l-r", default_value_t = 32)]
    pub l_r: u64,
    /// Global vision tokens (vision-object)
    #[arg(long = "l-z", default_value_t = 1408)]
    pub l_z: u64,
    /// Local infusion tokens (object-only)
    #[arg(long = "l-zl", default_value_t = 256)]
    pub l_zl: u64,
    /// Global infusion tokens (object-only)
    #[arg(long = "l-zg", default_value_t = 576)]
    pub l_zg: u64,
    /// Vary one count: `L_Z=a..b:step` (inclusive, step defaults to 1)
    #[arg(long)]
    pub sweep: Option<Sweep>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Output name inside --out-dir (default budget.csv / budget.json)
    #[arg(long)]
    pub output: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Count {
    LR,
    LZ,
    LZL,
    LZG,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sweep {
    pub count: Count,
    pub start: u64,
    pub end: u64,
    pub step: u64,
}

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let usage =
            || format!("expected NAME=a..b[:step] with NAME in L_R, L_Z, L_ZL, L_ZG, got {s:?}");
        let (name, range) = s.split_once('=').ok_or_else(usage)?;
        let count = match name.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "L_R" => Count::LR,
            "L_Z" => Count::LZ,
            "L_ZL" => Count::LZL,
            "L_ZG" => Count::LZG,
            _ => return Err(usage()),
        };
        let (range, step) = match range.split_once(':') {
            Some((r, st)) => (r, st.parse::<u64>().map_err(|_| usage())?),
            None => (range, 1),
        };
        let (a, b) = range.split_once("..").ok_or_else(usage)?;
        let start = a.parse::<u64>().map_err(|_| usage())?;
        let end = b.parse::<u64>().map_err(|_| usage())?;
        if step == 0 || start > end {
            return Err(format!("sweep needs a <= b and step > 0, got {s:?}"));
        }
        Ok(Sweep {
            count,
            start,
            end,
            step,
        })
    }
}

impl Sweep {
    pub fn values(&self) -> impl Iterator<Item = u64> + '_ {
        (self.start..=self.end).step_by(self.step.try_into().unwrap_or(usize::MAX))
    }

    fn apply(&self, base: TokenCounts, v: u64) -> TokenCounts {
        let mut c = base;
        *match self.count {
            Count::LR => &mut c.l_r,
            Count::LZ => &mut c.l_z,
            Count::LZL => &mut c.l_zl,
            Count::LZG => &mut c.l_zg,
        } = v;
        c
    }
}

#[derive(Serialize)]
struct JsonReport<'a> {
    config: &'a ModelDims,
    reports: &'a [BudgetReport],
}

fn wanted(framework: Option<Framework>, row: BudgetFramework) -> bool {
    match framework {
        None => true,
        Some(Framework::VisionObject) => row == BudgetFramework::VisionObject,
        Some(Framework::ObjectOnly) => row == BudgetFramework::ObjectOnly,
    }
}

pub fn budget_csv(
    dims: &ModelDims,
    reports: &[BudgetReport],
    framework: Option<Framework>,
) -> CliResult<String> {
    let mut out = format!(
        "# config {}\n{CSV_HEADER}\n",
        serde_json::to_string(dims).map_err(refertok::Error::from)?
    );
    for r in reports {
        for row in r
            .rows()
            .iter()
            .filter(|row| wanted(framework, row.framework))
        {
            out.push_str(&csv_line(row));
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn run(ctx: &Context, args: BudgetArgs) -> CliResult<()> {
    let model = args.model.as_deref().unwrap_or(&ctx.config.budget.model);
    let dims = ModelDims::resolve(model)?;
    let base = TokenCounts {
        l_r: args.l_r,
        l_z: args.l_z,
        l_zl: args.l_zl,
        l_zg: args.l_zg,
    };
    let counts: Vec<TokenCounts> = match &args.sweep {
        Some(s) => s.values().map(|v| s.apply(base, v)).collect(),
        None => vec![base],
    };
    let reports = counts
        .iter()
        .map(|c| compare_frameworks(c, &dims))
        .collect::<Result<Vec<_>, _>>()?;
    let (text, default_name) = match args.format {
        Format::Csv => (budget_csv(&dims, &reports, ctx.framework)?, "budget.csv"),
        Format::Json => {
            let j = serde_json::to_string_pretty(&JsonReport {
                config: &dims,
                reports: &reports,
            })
            .map_err(refertok::Error::from)?;
            (j + "\n", "budget.json")
        }
    };
    let name = args.output.as_deref().unwrap_or(default_name);
    write_text(&ctx.output(name)?, &text)?;
    eprintln!(
        "budget: {} report(s) for {} -> {}",
        reports.len(),
        dims.name,
        ctx.out_dir.join(name).display()
    );
    Ok(())
}
