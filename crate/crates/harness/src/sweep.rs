//! Sample-size sweeps: one learner run per `(n, seed)`, emitted as CSV in a
//! fixed order regardless of scheduling.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use skippy_core::regression::{constants, Constants, ProblemSize};
use skippy_core::{Error, Result};

use crate::config::{LearnerSettings, SweepPlan};
use crate::runner::{run_once, Prepared, RunResult};

pub const CSV_COLUMNS: [&str; 22] = [
    "n",
    "seed",
    "mode",
    "status",
    "estimate",
    "oracle",
    "error",
    "chosen",
    "chosen_provenance",
    "accepted",
    "family_size",
    "g_star_accepted",
    "sub_threshold",
    "lambda",
    "beta",
    "eps_bar",
    "zeta1",
    "zeta2",
    "eps_tilde",
    "alpha",
    "c_star",
    "d0",
];

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub seed: u64,
    /// `ok`, `empty_filter` or `error: ...`.
    pub status: String,
    pub constants: Option<Constants<f64>>,
    pub c_star: f64,
    pub result: Option<RunResult>,
}

/// The constants a run at sample size `n` will use.
pub fn constants_for(
    prep: &Prepared,
    settings: &LearnerSettings,
    n: usize,
) -> Result<Constants<f64>> {
    let inst = &prep.instance;
    let size = ProblemSize {
        horizon: inst.mdp.horizon(),
        dim: inst.features.dim(),
        actions: inst.mdp.actions(),
        n,
        l1: inst.features.l1(),
        l2: inst.l2,
        conc: prep.c_star,
        delta: settings.delta,
    };
    constants(&size, settings.mode, settings.alpha, &settings.multipliers)
}

pub fn run_sweep(
    prep: &Prepared,
    settings: &LearnerSettings,
    plan: &SweepPlan,
) -> Result<Vec<SweepRow>> {
    plan.validate()?;
    let cells: Vec<(usize, u64)> = plan
        .n_grid
        .iter()
        .flat_map(|n| (0..plan.seeds as u64).map(move |s| (*n, plan.first_seed + s)))
        .collect();
    Ok(cells
        .par_iter()
        .map(|(n, seed)| {
            let constants = constants_for(prep, settings, *n).ok();
            let (status, result) = match run_once(prep, settings, *n, *seed) {
                Ok(r) => ("ok".to_string(), Some(r)),
                Err(Error::EmptyFilter { .. }) => ("empty_filter".to_string(), None),
                Err(e) => (format!("error: {e}"), None),
            };
            SweepRow {
                n: *n,
                seed: *seed,
                status,
                constants,
                c_star: prep.c_star,
                result,
            }
        })
        .collect())
}

fn num(x: f64) -> String {
    format!("{x}")
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for row in rows {
        let r = row.result.as_ref();
        let c = row.constants.as_ref();
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        let record = vec![
            row.n.to_string(),
            row.seed.to_string(),
            r.map(|r| format!("{:?}", r.mode).to_lowercase())
                .unwrap_or_default(),
            row.status.clone(),
            opt(r.map(|r| r.estimate)),
            opt(r.map(|r| r.oracle)),
            opt(r.map(|r| r.error)),
            r.map(|r| r.chosen.to_string()).unwrap_or_default(),
            r.map(|r| {
                serde_json::to_string(&r.chosen_provenance)
                    .unwrap_or_default()
                    .replace('"', "")
            })
            .unwrap_or_default(),
            r.map(|r| r.accepted.to_string()).unwrap_or_default(),
            r.map(|r| r.family_size.to_string()).unwrap_or_default(),
            r.map(|r| r.g_star_accepted.to_string()).unwrap_or_default(),
            r.map(|r| r.sub_threshold.to_string()).unwrap_or_default(),
            opt(c.map(|c| c.lambda)),
            opt(c.map(|c| c.beta)),
            opt(c.map(|c| c.eps_bar)),
            opt(c.map(|c| c.zeta1)),
            opt(c.map(|c| c.zeta2)),
            opt(c.map(|c| c.eps_tilde)),
            opt(c.map(|c| c.alpha)),
            num(row.c_star),
            c.map(|c| c.d0.to_string()).unwrap_or_default(),
        ];
        w.write_record(&record).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Median of the finite errors of successful rows at sample size `n`.
pub fn median_error(rows: &[SweepRow], n: usize) -> Option<f64> {
    let errs: Vec<f64> = rows
        .iter()
        .filter(|r| r.n == n)
        .filter_map(|r| r.result.as_ref().map(|x| x.error))
        .collect();
    median(errs)
}

pub fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    Some(if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    })
}
