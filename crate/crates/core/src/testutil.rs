//! Shared fixtures for the unit tests.

use std::sync::OnceLock;

use crate::lfr::ClosedLoopLfr;
use crate::linalg::Mat;
use crate::mpcdesign::{design_mpc, design_parts, DesignConfig, DesignInputs, MpcDesign};
use crate::study::{case_study, CaseStudy};

pub(crate) struct Fixture {
    pub cs: CaseStudy,
    pub clfr: ClosedLoopLfr,
    pub sigma_half: Mat,
    pub nw: usize,
    pub d: MpcDesign,
}

pub(crate) const N_COV: usize = 8;

/// Identified 1-mass chain with its robust controller and a small tube MPC design.
pub(crate) fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cs = case_study(1, 3, 1000, 0.95).unwrap();
        let (q, r) = cs.id.covariances().unwrap();
        let perf = cs.id.performance();
        let inp = DesignInputs {
            model: &cs.id.model,
            ell: &cs.id.ellipsoid,
            controller: &cs.robust.controller,
            q: &q,
            r: &r,
            perf: &perf,
            constraints: &cs.constraints,
            x0_mean: &cs.x0_mean,
            x0_cov: &cs.x0_cov,
        };
        let (open, clfr, sigma_half, _) = design_parts(&inp, false).unwrap();
        let d = design_mpc(&inp, &DesignConfig { n_cov: N_COV, horizon: 40, grid_points: 16, nominal: false }).unwrap();
        Fixture { nw: open.nw(), cs, clfr, sigma_half, d }
    })
}
