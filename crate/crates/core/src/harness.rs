//! Seeded Monte Carlo experiments.
//!
//! Trial `j` of an experiment with base seed `s` uses the stream
//! `RandomStream::new(mix64(s, j))` and splits it by purpose:
//!
//! | key | use |
//! |-----|-----|
//! | 0 | measurement matrix (per-trial mode) |
//! | 1 | true support |
//! | 2 | channel noise |
//! | 3 | decoder randomness (RSBP) |
//!
//! so a trial depends only on `(config, j)`, and every algorithm sees the
//! same instances for the same seed. Trials run on the current rayon pool;
//! outcomes are collected in trial order and reduced sequentially, which
//! makes results independent of the worker count.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::bp::{bp_flood, BpConfig, LlrVector};
use crate::design::{bernoulli_design, sample_support};
use crate::error::{invalid, Error, Result};
use crate::model::{apply_noise, or_measure, MeasurementMatrix, NoiseChannel, Prior, ProblemInstance, SupportVector};
use crate::oracle::{map_probabilistic, ml_combinatorial, DEFAULT_CANDIDATE_CAP};
use crate::rng::{mix64, RandomStream};
use crate::schedule::{nwrbp, rsbp_with, RsbpSampling, SequentialBudget};
use crate::select::{threshold_select, top_k_select, DefectiveSet};

const MATRIX_KEY: u64 = 0;
const SUPPORT_KEY: u64 = 1;
const NOISE_KEY: u64 = 2;
const DECODER_KEY: u64 = 3;
/// Key for the single design shared by all trials in fixed-matrix mode.
const FIXED_MATRIX_KEY: u64 = u64::MAX;

pub const CSV_HEADER: &str = "model,N,K,M,rho,algorithm,tau,trials,iters_or_budget,seed,success_rate,fnr,fpr,fn_count,fp_count,defective_total,nondefective_total,wall_time_s";

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($(#[$vmeta:meta])* $variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($(#[$vmeta])* $variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => {
                        let names: Vec<&str> = $name::ALL.iter().map(|v| v.name()).collect();
                        Err(invalid(format!("unknown {} {other:?}; expected one of {}", stringify!($name).to_lowercase(), names.join(", "))))
                    }
                }
            }
        }
    };
}

named_enum!(
    /// Prior over the defective set.
    Model {
        Combinatorial => "combinatorial",
        Probabilistic => "probabilistic",
    }
);

named_enum!(Algorithm {
    Bp => "bp",
    Rsbp => "rsbp",
    Nwrbp => "nwrbp",
    Optimal => "optimal",
});

named_enum!(
    /// Whether the design is redrawn for every trial or shared by all.
    MatrixMode {
        PerTrial => "per-trial",
        Fixed => "fixed",
    }
);

named_enum!(
    /// How the hidden support of a trial is drawn.
    TruthSampling {
        /// From the model's own prior.
        Prior => "prior",
        /// Exactly K defectives, uniformly, whatever the model; the decoder
        /// still uses the model's prior.
        ExactK => "exact-k",
    }
);

named_enum!(
    /// How FNR and FPR are averaged over trials.
    Aggregation {
        /// Summed counts over summed denominators.
        Pooled => "pooled",
        /// Mean of per-trial ratios, over trials whose denominator is
        /// non-zero.
        PerTrialMean => "per-trial-mean",
    }
);

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub model: Model,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub rho: f64,
    pub algorithm: Algorithm,
    pub trials: usize,
    pub seed: u64,
    /// Selection threshold for the probabilistic model.
    pub tau: f64,
    /// Flooding rounds for `bp`.
    pub iterations: usize,
    /// Test updates for `rsbp` and `nwrbp`; `None` means `10·M`.
    pub budget: Option<usize>,
    pub rsbp_sampling: RsbpSampling,
    pub truth: TruthSampling,
    pub matrix_mode: MatrixMode,
    /// Design used by every trial in fixed mode; drawn from the base seed
    /// when absent.
    pub fixed_matrix: Option<Arc<MeasurementMatrix>>,
    /// Weight bound for probabilistic `optimal`; `None` means `K + 3`.
    pub w_max: Option<usize>,
    /// Design density is `ν/K`.
    pub nu: f64,
    pub aggregation: Aggregation,
    pub candidate_cap: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: Model::Combinatorial,
            n: 100,
            k: 2,
            m: 30,
            rho: 0.01,
            algorithm: Algorithm::Bp,
            trials: 3000,
            seed: 0,
            tau: 0.0,
            iterations: BpConfig::default().iterations,
            budget: None,
            rsbp_sampling: RsbpSampling::default(),
            truth: TruthSampling::Prior,
            matrix_mode: MatrixMode::PerTrial,
            fixed_matrix: None,
            w_max: None,
            nu: std::f64::consts::LN_2,
            aggregation: Aggregation::Pooled,
            candidate_cap: DEFAULT_CANDIDATE_CAP,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(invalid("trials must be at least 1"));
        }
        if self.m == 0 {
            return Err(invalid("M must be at least 1"));
        }
        if self.k == 0 || self.k >= self.n {
            return Err(invalid(format!("need 0 < K < N, got K = {}, N = {}", self.k, self.n)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(invalid(format!("nu must be positive, got {}", self.nu)));
        }
        if self.tau.is_nan() {
            return Err(invalid("tau is NaN"));
        }
        if let Some(fixed) = &self.fixed_matrix {
            if fixed.items() != self.n || fixed.tests() != self.m {
                return Err(invalid(format!(
                    "fixed matrix is {}x{} (M x N), config asks for {}x{}",
                    fixed.tests(),
                    fixed.items(),
                    self.m,
                    self.n
                )));
            }
        }
        Ok(())
    }

    pub fn prior(&self) -> Result<Prior> {
        match self.model {
            Model::Combinatorial => Prior::combinatorial(self.k, self.n),
            Model::Probabilistic => Prior::probabilistic(self.k, self.n),
        }
    }

    pub fn sequential_budget(&self) -> SequentialBudget {
        SequentialBudget::new(
            self.budget
                .unwrap_or_else(|| SequentialBudget::matching_flooding(BpConfig::default().iterations, self.m).updates),
        )
    }

    pub fn effective_w_max(&self) -> usize {
        self.w_max.unwrap_or(self.k + 3)
    }

    /// The `iters_or_budget` CSV column: flooding rounds, sequential test
    /// updates, `w_max` for probabilistic `optimal`, 0 for combinatorial
    /// `optimal`.
    pub fn iters_or_budget(&self) -> usize {
        match (self.algorithm, self.model) {
            (Algorithm::Bp, _) => self.iterations,
            (Algorithm::Rsbp | Algorithm::Nwrbp, _) => self.sequential_budget().updates,
            (Algorithm::Optimal, Model::Combinatorial) => 0,
            (Algorithm::Optimal, Model::Probabilistic) => self.effective_w_max(),
        }
    }

    /// Stream of trial `trial_index`.
    pub fn trial_stream(&self, trial_index: u64) -> RandomStream {
        RandomStream::new(mix64(self.seed, trial_index))
    }

    /// The design shared by all trials in fixed mode.
    pub fn resolve_fixed_matrix(&self) -> Option<Arc<MeasurementMatrix>> {
        match self.matrix_mode {
            MatrixMode::PerTrial => None,
            MatrixMode::Fixed => Some(self.fixed_matrix.clone().unwrap_or_else(|| {
                Arc::new(bernoulli_design(
                    self.n,
                    self.m,
                    self.k,
                    self.nu,
                    mix64(self.seed, FIXED_MATRIX_KEY),
                ))
            })),
        }
    }
}

/// Score of one trial against the truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct TrialOutcome {
    pub success: bool,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub defectives: usize,
    pub nondefectives: usize,
}

impl TrialOutcome {
    pub fn score(truth: &SupportVector, declared: &DefectiveSet) -> Self {
        let defectives = truth.defective_count();
        let hits = declared.indices().iter().filter(|&&i| truth.is_defective(i)).count();
        let false_negatives = defectives - hits;
        let false_positives = declared.len() - hits;
        let outcome = Self {
            success: false_negatives == 0 && false_positives == 0,
            false_negatives,
            false_positives,
            defectives,
            nondefectives: truth.items() - defectives,
        };
        debug_assert_eq!(outcome.success, DefectiveSet::from_support(truth) == *declared);
        outcome
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// Threshold the row was scored at; `None` for the combinatorial model.
    pub tau: Option<f64>,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub fnr: f64,
    pub fpr: f64,
    pub fn_count: usize,
    pub fp_count: usize,
    pub defective_total: usize,
    pub nondefective_total: usize,
    pub wall_time_s: f64,
}

impl ExperimentResult {
    fn aggregate(config: &ExperimentConfig, tau: Option<f64>, outcomes: &[TrialOutcome], wall_time_s: f64) -> Self {
        let mut r = Self {
            config: config.clone(),
            tau,
            trials: outcomes.len(),
            successes: 0,
            success_rate: 0.0,
            fnr: 0.0,
            fpr: 0.0,
            fn_count: 0,
            fp_count: 0,
            defective_total: 0,
            nondefective_total: 0,
            wall_time_s,
        };
        let (mut fnr_sum, mut fnr_n, mut fpr_sum, mut fpr_n) = (0.0, 0usize, 0.0, 0usize);
        for o in outcomes {
            r.successes += o.success as usize;
            r.fn_count += o.false_negatives;
            r.fp_count += o.false_positives;
            r.defective_total += o.defectives;
            r.nondefective_total += o.nondefectives;
            if o.defectives > 0 {
                fnr_sum += o.false_negatives as f64 / o.defectives as f64;
                fnr_n += 1;
            }
            if o.nondefectives > 0 {
                fpr_sum += o.false_positives as f64 / o.nondefectives as f64;
                fpr_n += 1;
            }
        }
        let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
        r.success_rate = ratio(r.successes as f64, r.trials);
        match config.aggregation {
            Aggregation::Pooled => {
                r.fnr = ratio(r.fn_count as f64, r.defective_total);
                r.fpr = ratio(r.fp_count as f64, r.nondefective_total);
            }
            Aggregation::PerTrialMean => {
                r.fnr = ratio(fnr_sum, fnr_n);
                r.fpr = ratio(fpr_sum, fpr_n);
            }
        }
        r
    }

    /// Binomial standard error of the success rate.
    pub fn success_se(&self) -> f64 {
        (self.success_rate * (1.0 - self.success_rate) / self.trials as f64).sqrt()
    }

    /// One CSV line (no trailing newline). `wall_time_s` is left empty unless
    /// `timing` is set, so repeated runs produce identical bytes.
    pub fn csv_row(&self, timing: bool) -> String {
        let c = &self.config;
        let tau = self.tau.map(format_g6).unwrap_or_default();
        let wall = if timing {
            format_g6(self.wall_time_s)
        } else {
            String::new()
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.model,
            c.n,
            c.k,
            c.m,
            format_g6(c.rho),
            c.algorithm,
            tau,
            self.trials,
            c.iters_or_budget(),
            c.seed,
            format_g6(self.success_rate),
            format_g6(self.fnr),
            format_g6(self.fpr),
            self.fn_count,
            self.fp_count,
            self.defective_total,
            self.nondefective_total,
            wall
        )
    }
}

/// Formats like C's `%.6g`.
pub fn format_g6(x: f64) -> String {
    const PRECISION: i32 = 6;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..PRECISION).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mantissa), sign, exp.abs())
    } else {
        trim(&format!("{:.*}", (PRECISION - 1 - exp) as usize, x))
    }
}

/// `steps` evenly spaced points from `min` to `max`; `steps = 1` gives `[min]`.
pub fn tau_grid(min: f64, max: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![min],
        _ => (0..steps)
            .map(|j| {
                if j + 1 == steps {
                    max
                } else {
                    min + (max - min) * j as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    }
}

/// Draws trial `trial_index`'s instance; `fixed` overrides the per-trial design.
pub fn draw_instance(
    config: &ExperimentConfig,
    trial_index: u64,
    fixed: Option<&Arc<MeasurementMatrix>>,
) -> Result<(ProblemInstance, RandomStream)> {
    let stream = config.trial_stream(trial_index);
    let matrix = match fixed {
        Some(m) => Arc::clone(m),
        None => Arc::new(bernoulli_design(
            config.n,
            config.m,
            config.k,
            config.nu,
            stream.split(MATRIX_KEY).seed(),
        )),
    };
    let prior = config.prior()?;
    let channel = NoiseChannel::new(config.rho)?;
    let truth_prior = match config.truth {
        TruthSampling::Prior => prior,
        TruthSampling::ExactK => Prior::combinatorial(config.k, config.n)?,
    };
    let truth = sample_support(&truth_prior, &mut stream.split(SUPPORT_KEY));
    let clean = or_measure(&matrix, &truth)?;
    let observed = apply_noise(&clean, &channel, &mut stream.split(NOISE_KEY));
    let instance = ProblemInstance::new(matrix, truth, observed, channel, prior)?;
    Ok((instance, stream.split(DECODER_KEY)))
}

/// Posterior LLRs from one of the message-passing decoders.
pub fn decode_llrs(config: &ExperimentConfig, instance: &ProblemInstance, rng: &mut RandomStream) -> Result<LlrVector> {
    Ok(match config.algorithm {
        Algorithm::Bp => bp_flood(
            instance,
            &BpConfig {
                iterations: config.iterations,
                ..BpConfig::default()
            },
        ),
        Algorithm::Rsbp => rsbp_with(instance, config.sequential_budget(), config.rsbp_sampling, rng),
        Algorithm::Nwrbp => nwrbp(instance, config.sequential_budget()),
        Algorithm::Optimal => return Err(invalid("the optimal decoder does not produce LLRs")),
    })
}

/// The configured decoder followed by top-K or threshold selection.
pub fn decode(config: &ExperimentConfig, instance: &ProblemInstance, rng: &mut RandomStream) -> Result<DefectiveSet> {
    let y = &instance.outcomes;
    let matrix = &instance.matrix;
    match (config.algorithm, config.model) {
        (Algorithm::Optimal, Model::Combinatorial) => {
            ml_combinatorial(y, matrix, &instance.channel, config.k, config.candidate_cap)
        }
        (Algorithm::Optimal, Model::Probabilistic) => map_probabilistic(
            y,
            matrix,
            &instance.channel,
            &instance.prior,
            config.effective_w_max(),
            config.candidate_cap,
        ),
        (_, Model::Combinatorial) => Ok(top_k_select(&decode_llrs(config, instance, rng)?, config.k)),
        (_, Model::Probabilistic) => Ok(threshold_select(&decode_llrs(config, instance, rng)?, config.tau)),
    }
}

/// Runs trial `trial_index` with the configured decoder.
pub fn run_trial(config: &ExperimentConfig, trial_index: u64) -> Result<TrialOutcome> {
    config.validate()?;
    let fixed = config.resolve_fixed_matrix();
    run_prepared(config, trial_index, fixed.as_ref())
}

/// Runs trial `trial_index` with a caller-supplied decoder in place of the
/// configured one.
pub fn run_trial_with<D>(config: &ExperimentConfig, trial_index: u64, decoder: D) -> Result<TrialOutcome>
where
    D: FnOnce(&ProblemInstance, &mut RandomStream) -> Result<DefectiveSet>,
{
    config.validate()?;
    let fixed = config.resolve_fixed_matrix();
    let (instance, mut rng) = draw_instance(config, trial_index, fixed.as_ref())?;
    let declared = decoder(&instance, &mut rng)?;
    Ok(TrialOutcome::score(&instance.truth, &declared))
}

fn run_prepared(
    config: &ExperimentConfig,
    trial_index: u64,
    fixed: Option<&Arc<MeasurementMatrix>>,
) -> Result<TrialOutcome> {
    let (instance, mut rng) = draw_instance(config, trial_index, fixed)?;
    let declared = decode(config, &instance, &mut rng)?;
    Ok(TrialOutcome::score(&instance.truth, &declared))
}

/// Runs all trials and pools the counts.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let start = Instant::now();
    let fixed = config.resolve_fixed_matrix();
    let outcomes: Vec<TrialOutcome> = (0..config.trials as u64)
        .into_par_iter()
        .map(|j| run_prepared(config, j, fixed.as_ref()))
        .collect::<Result<_>>()?;
    let tau = (config.model == Model::Probabilistic).then_some(config.tau);
    Ok(ExperimentResult::aggregate(
        config,
        tau,
        &outcomes,
        start.elapsed().as_secs_f64(),
    ))
}

/// Decodes every trial once and scores the LLRs at each threshold in `grid`.
/// Probabilistic model and message-passing algorithms only.
pub fn sweep_tau(config: &ExperimentConfig, grid: &[f64]) -> Result<Vec<ExperimentResult>> {
    config.validate()?;
    if config.model != Model::Probabilistic {
        return Err(invalid("the tau sweep needs the probabilistic model"));
    }
    if config.algorithm == Algorithm::Optimal {
        return Err(invalid("the tau sweep needs a message-passing algorithm, not optimal"));
    }
    if grid.iter().any(|t| t.is_nan()) {
        return Err(invalid("tau grid contains NaN"));
    }
    let start = Instant::now();
    let fixed = config.resolve_fixed_matrix();
    let per_trial: Vec<Vec<TrialOutcome>> = (0..config.trials as u64)
        .into_par_iter()
        .map(|j| {
            let (instance, mut rng) = draw_instance(config, j, fixed.as_ref())?;
            let llrs = decode_llrs(config, &instance, &mut rng)?;
            Ok(grid
                .iter()
                .map(|&tau| TrialOutcome::score(&instance.truth, &threshold_select(&llrs, tau)))
                .collect())
        })
        .collect::<Result<_>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    Ok(grid
        .iter()
        .enumerate()
        .map(|(g, &tau)| {
            let column: Vec<TrialOutcome> = per_trial.iter().map(|row| row[g]).collect();
            let mut cfg = config.clone();
            cfg.tau = tau;
            ExperimentResult::aggregate(&cfg, Some(tau), &column, elapsed)
        })
        .collect())
}

/// Runs `f` on a dedicated pool of `threads` workers (0 means rayon's
/// default).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}
