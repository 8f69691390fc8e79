use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ato", version, about = "Fit and evaluate activation transport operators")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// More log output; repeat for debug. ATO_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted pairset with known ground truth.
    Synth(SynthArgs),
    /// Fit a cross-validated ridge operator.
    Fit(FitArgs),
    /// Transport efficiency per rank.
    Efficiency(EfficiencyArgs),
    /// Score features of a dictionary on held-out rows.
    EvalFeatures(EvalFeaturesArgs),
    /// Ablation and patching on the built-in toy transformer.
    Causal(CausalArgs),
    /// Check an .atd, .ato or .fdict file.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub d_model: usize,
    #[arg(long)]
    pub rows: usize,
    /// Rank s of the planted map.
    #[arg(long)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gain: f64,
    /// Nonlinear dimensions appended after the transported block.
    #[arg(long, default_value_t = 0)]
    pub synth_dims: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Truth JSON path (default: <out>.truth.json).
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.6,0.2,0.2", value_parser = parse_fractions)]
    pub split: [f64; 3],
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// `lo..hixN` for N log-spaced values, or a comma list.
    #[arg(long, default_value = "1e-4..1e4x9", value_parser = parse_alpha_grid)]
    pub alpha_grid: AlphaGrid,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub fold_seed: u64,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EfficiencyArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub op: PathBuf,
    /// `start:step:full`, `start:step:end`, or a comma list.
    #[arg(long, default_value = "1:50:full", value_parser = parse_rank_grid)]
    pub ranks: RankGrid,
    /// Split seed used when the operator does not record its split.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// CSV report.
    #[arg(long)]
    pub out: PathBuf,
    /// Full JSON report.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalFeaturesArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub op: PathBuf,
    /// Feature dictionary (default: identity on the residual basis).
    #[arg(long)]
    pub dict: Option<PathBuf>,
    #[arg(long, default_value_t = ato_core::features::DEFAULT_MIN_COUNT)]
    pub min_count: usize,
    #[arg(long, default_value_t = ato_core::features::DEFAULT_R2_FLOOR, allow_negative_numbers = true)]
    pub r2_floor: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Per-feature CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Histogram and skip summary as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CausalArgs {
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 1.0)]
    pub weight_scale: f64,
    /// Model weight seed.
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    /// Layer whose residual is edited; the source is target − k.
    #[arg(long, default_value_t = 6)]
    pub target_layer: usize,
    #[arg(long, default_value = "1,2,4", value_delimiter = ',')]
    pub leaps: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 64)]
    pub train_seqs: usize,
    #[arg(long, default_value_t = 20)]
    pub eval_seqs: usize,
    /// Positions per trial: a count, or `all`.
    #[arg(long, default_value = "5", value_parser = parse_positions)]
    pub positions: ato_core::toy::PositionMode,
    #[arg(long, default_value_t = 3)]
    pub position_sets: usize,
    #[arg(long, default_value_t = 7)]
    pub position_seed: u64,
    #[arg(long, default_value_t = 100)]
    pub train_seed: u64,
    #[arg(long, default_value_t = 200)]
    pub eval_seed: u64,
    /// CSV report.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaGrid(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub enum RankGrid {
    /// `start`, `start + step`, … up to `end` (or d_model), then the end itself.
    Stepped { start: usize, step: usize, end: Option<usize> },
    List(Vec<usize>),
}

impl RankGrid {
    pub fn resolve(&self, d_model: usize) -> Vec<usize> {
        match self {
            RankGrid::List(v) => v.clone(),
            RankGrid::Stepped { start, step, end } => {
                let end = end.unwrap_or(d_model);
                let mut out: Vec<usize> = (*start..=end).step_by(*step).collect();
                if out.last() != Some(&end) {
                    out.push(end);
                }
                out
            }
        }
    }
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.trim().parse::<f64>().map_err(|_| format!("not a number: {s:?}"))
}

fn parse_usize(s: &str) -> Result<usize, String> {
    s.trim().parse::<usize>().map_err(|_| format!("not a non-negative integer: {s:?}"))
}

pub fn parse_alpha_grid(s: &str) -> Result<AlphaGrid, String> {
    let values = if let Some((lo, rest)) = s.split_once("..") {
        let (hi, count) = rest
            .split_once('x')
            .ok_or_else(|| format!("expected lo..hixN, got {s:?}"))?;
        let (lo, hi, count) = (parse_f64(lo)?, parse_f64(hi)?, parse_usize(count)?);
        if !(lo > 0.0 && hi >= lo) || count == 0 || (count == 1 && hi != lo) {
            return Err(format!("bad alpha range {s:?}"));
        }
        ato_core::operator::log_grid(lo, hi, count)
    } else {
        s.split(',').map(parse_f64).collect::<Result<Vec<_>, _>>()?
    };
    if values.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err("alphas must be finite and positive".into());
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err("alphas must be strictly increasing".into());
    }
    Ok(AlphaGrid(values))
}

pub fn parse_rank_grid(s: &str) -> Result<RankGrid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [start, step, end] => {
            let (start, step) = (parse_usize(start)?, parse_usize(step)?);
            if start == 0 || step == 0 {
                return Err("rank start and step must be positive".into());
            }
            let end = match end.trim() {
                "full" => None,
                e => Some(parse_usize(e)?),
            };
            if end.is_some_and(|e| e < start) {
                return Err(format!("rank end below start in {s:?}"));
            }
            Ok(RankGrid::Stepped { start, step, end })
        }
        [list] => {
            let v = list.split(',').map(parse_usize).collect::<Result<Vec<_>, _>>()?;
            if v.contains(&0) {
                return Err("ranks must be positive".into());
            }
            Ok(RankGrid::List(v))
        }
        _ => Err(format!("expected start:step:end or a comma list, got {s:?}")),
    }
}

pub fn parse_fractions(s: &str) -> Result<[f64; 3], String> {
    let v = s.split(',').map(parse_f64).collect::<Result<Vec<_>, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| "split needs three fractions".to_string())
}

pub fn parse_positions(s: &str) -> Result<ato_core::toy::PositionMode, String> {
    use ato_core::toy::PositionMode;
    match s.trim() {
        "all" => Ok(PositionMode::All),
        n => match parse_usize(n)? {
            0 => Err("need at least one position".into()),
            n => Ok(PositionMode::Random(n)),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_range_syntax() {
        let AlphaGrid(g) = parse_alpha_grid("1e-4..1e4x9").unwrap();
        assert_eq!(g.len(), 9);
        assert!((g[0] - 1e-4).abs() < 1e-18);
        assert!((g[4] - 1.0).abs() < 1e-12);
        assert!((g[8] - 1e4).abs() < 1e-8);
        assert_eq!(parse_alpha_grid("0.1,1,10").unwrap().0, vec![0.1, 1.0, 10.0]);
        for bad in ["1..10", "0..1x3", "1,1", "-1", "1e4..1e-4x9", "a..bxc"] {
            assert!(parse_alpha_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn rank_grid_syntax() {
        let g = parse_rank_grid("1:50:full").unwrap();
        assert_eq!(g.resolve(128), vec![1, 51, 101, 128]);
        assert_eq!(g.resolve(101), vec![1, 51, 101]);
        assert_eq!(g.resolve(1), vec![1]);
        assert_eq!(parse_rank_grid("2:2:8").unwrap().resolve(64), vec![2, 4, 6, 8]);
        assert_eq!(parse_rank_grid("1:3:8").unwrap().resolve(64), vec![1, 4, 7, 8]);
        assert_eq!(parse_rank_grid("3,1,2").unwrap().resolve(64), vec![3, 1, 2]);
        for bad in ["0:1:full", "1:0:full", "5:1:2", "1:2", "1,0", "x"] {
            assert!(parse_rank_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn positions_and_fractions() {
        use ato_core::toy::PositionMode;
        assert_eq!(parse_positions("all").unwrap(), PositionMode::All);
        assert_eq!(parse_positions("5").unwrap(), PositionMode::Random(5));
        assert!(parse_positions("0").is_err());
        assert_eq!(parse_fractions("0.6,0.2,0.2").unwrap(), [0.6, 0.2, 0.2]);
        assert!(parse_fractions("0.5,0.5").is_err());
    }
}
