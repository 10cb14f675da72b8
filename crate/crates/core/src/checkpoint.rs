//! Checkpointing: a `SimConfig` plus a `PathState` snapshot, serialized as
//! JSON, is enough to resume a run bit-identically.
//!
//! Two properties make exact resume possible: the noise stream is a pure
//! function of `(seed, path_id, step_index)`, and occupation aggregates are
//! canonical functions of the cell values, so rebuilding them from the cell
//! snapshot reproduces the live structure exactly. JSON numbers are written
//! in shortest round-trip form, so every `f64` survives the trip.

use crate::integrator::{serialization, PathState, SimConfig};
use crate::occupation::CellRecord;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: SimConfig,
    pub path_id: u64,
    state: PathState,
    cells: Vec<CellRecord>,
    bin_width: f64,
}

impl Checkpoint {
    pub fn capture(config: &SimConfig, state: &PathState) -> Self {
        let (state, cells, bin_width) = serialization::snapshot_state(state);
        Checkpoint { config: config.clone(), path_id: state.path_id, state, cells, bin_width }
    }

    /// Reconstruct the path state, rebuilding the occupation measure
    /// canonically from the cell snapshot.
    pub fn into_state(self) -> Result<(SimConfig, PathState)> {
        if (self.bin_width - self.config.bin_width).abs() > 0.0 {
            return Err(Error::BadCheckpoint(format!(
                "snapshot bin_width {} disagrees with config bin_width {}",
                self.bin_width, self.config.bin_width
            )));
        }
        let state = serialization::restore_state(self.state, self.cells, self.bin_width)?;
        Ok((self.config, state))
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self).map_err(|e| Error::BadCheckpoint(e.to_string()))
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        serde_json::from_reader(r).map_err(|e| Error::BadCheckpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{run_path, PathRunner};
    use crate::kernels::Kernel;

    /// Run to t1, checkpoint through JSON, resume to t2; the result must be
    /// bit-identical to an uninterrupted run to t2.
    #[test]
    fn resume_is_bit_identical_to_straight_run() {
        let kernel = Kernel::durrett_rogers(0.5).unwrap();
        let mut cfg = SimConfig::new(kernel, 24.0).unwrap();
        cfg.seed = 99;

        let straight = run_path(&cfg, 4).unwrap();
        assert!(straight.aborted.is_none());

        // Interrupted run: stop midway, round-trip through JSON, resume.
        let runner = PathRunner::new(&cfg, 4).unwrap();
        let mut st = runner.fresh_state(4).unwrap();
        while st.t < 11.0 {
            runner.step(&mut st).unwrap();
        }
        let mut buf = Vec::new();
        Checkpoint::capture(&cfg, &st).write_json(&mut buf).unwrap();
        let (cfg2, mut resumed) = Checkpoint::read_json(buf.as_slice()).unwrap().into_state().unwrap();
        assert_eq!(cfg2, cfg);
        let runner2 = PathRunner::new(&cfg2, 4).unwrap();
        assert!(runner2.run_to_end(&mut resumed).is_none());

        assert_eq!(resumed.x.to_bits(), straight.state.x.to_bits());
        assert_eq!(resumed.t.to_bits(), straight.state.t.to_bits());
        assert_eq!(resumed.step_index, straight.state.step_index);
        assert_eq!(resumed.records.len(), straight.state.records.len());
        for (a, b) in resumed.records.iter().zip(straight.state.records.iter()) {
            assert_eq!(a.t.to_bits(), b.t.to_bits());
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.g.to_bits(), b.g.to_bits());
        }
        assert_eq!(resumed.hittings.len(), straight.state.hittings.len());
        for (a, b) in resumed.hittings.iter().zip(straight.state.hittings.iter()) {
            assert_eq!(a.t_hit.to_bits(), b.t_hit.to_bits());
            assert_eq!(a.ratio.to_bits(), b.ratio.to_bits());
        }
        // The backward-drift diagnostic must survive the trip as well.
        let straight_gamma = straight.state.gamma.backward_drift_deficit(&cfg.kernel, straight.state.x).unwrap();
        let resumed_gamma = resumed.gamma.backward_drift_deficit(&cfg.kernel, resumed.x).unwrap();
        assert_eq!(straight_gamma.to_bits(), resumed_gamma.to_bits());
    }

    #[test]
    fn checkpoint_rejects_mismatched_bin_width() {
        let kernel = Kernel::zero();
        let cfg = SimConfig::new(kernel, 1.0).unwrap();
        let runner = PathRunner::new(&cfg, 0).unwrap();
        let st = runner.fresh_state(0).unwrap();
        let mut ck = Checkpoint::capture(&cfg, &st);
        ck.config.bin_width *= 2.0;
        assert!(ck.into_state().is_err());
    }
}
