use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

use super::batch::{make_batches, BatchView, EvidenceTable};
use super::config::{Mode, TrainConfig};
use super::step::{train_step, LossBreakdown, RelationStats, TrainState};

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: usize,
    pub epoch: usize,
    pub batch: usize,
    pub mode: Mode,
    pub learning_rate: f64,
    pub losses: LossBreakdown,
    pub relations: Option<RelationStats>,
}

/// Shuffle seed of one epoch.
pub fn epoch_seed(seed: u64, phase: usize, epoch: usize) -> u64 {
    // splitmix64 finaliser over the packed coordinates
    let mut z = seed
        ^ (phase as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the configured schedule from wherever `state` left off, calling
/// `on_step` after every optimizer step. The global baseline trains on the
/// paired subset only, with fully paired batches.
pub fn train(
    corpus: &Corpus,
    evidence: &EvidenceTable,
    cfg: &TrainConfig,
    state: &mut TrainState,
    on_step: &mut dyn FnMut(&StepRecord, &TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let paired_only;
    let (data, fraction) = match cfg.mode {
        Mode::Lgdea => (corpus, cfg.paired_fraction_per_batch),
        Mode::GlobalBaseline => {
            paired_only = corpus.paired_only();
            (&paired_only, 1.0)
        }
    };
    let phases = cfg.phases();
    let budget_left = |s: &TrainState| cfg.max_steps.is_none_or(|max| s.step < max);

    while budget_left(state) {
        // past the last phase only a step budget keeps training going
        let overflow = state.phase >= phases.len();
        if overflow && cfg.max_steps.is_none() {
            break;
        }
        let phase = phases[state.phase.min(phases.len() - 1)];
        if !overflow && state.epoch >= phase.epochs {
            state.phase += 1;
            state.epoch = 0;
            state.batch_cursor = 0;
            continue;
        }
        let batches = make_batches(
            data,
            phase.batch_size,
            fraction,
            epoch_seed(cfg.seed, state.phase, state.epoch),
        )?;
        if state.batch_cursor > batches.len() {
            return Err(Error::config(format!(
                "resume cursor {} beyond the {} batches of epoch {}",
                state.batch_cursor,
                batches.len(),
                state.epoch
            )));
        }
        while state.batch_cursor < batches.len() && budget_left(state) {
            let batch = &batches[state.batch_cursor];
            let view = BatchView::new(data, evidence, batch)?;
            let out = train_step(state, &view, cfg, phase.learning_rate)?;
            let record = StepRecord {
                step: state.step,
                phase: state.phase,
                epoch: state.epoch,
                batch: state.batch_cursor,
                mode: cfg.mode,
                learning_rate: phase.learning_rate,
                losses: out.losses,
                relations: out
                    .relations
                    .as_ref()
                    .map(|r| RelationStats::of(r, view.n_paired)),
            };
            state.batch_cursor += 1;
            on_step(&record, state)?;
        }
        if state.batch_cursor == batches.len() {
            state.epoch += 1;
            state.batch_cursor = 0;
        }
    }
    Ok(())
}

/// Writes step records as JSON lines.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &StepRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
