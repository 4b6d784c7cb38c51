//! Command implementations behind the `dbraf` binary.
//!
//! Every command reads one [`RunConfig`] JSON document and writes its
//! artifacts into an output directory:
//!
//! | command | files |
//! |---------|-------|
//! | `synth` | `train.csv`, `test.csv`, `labels.csv`, `provenance.json` |
//! | `train` | `model.ckpt`, `history.jsonl`, `config.json` |
//! | `eval`  | `report.json`, `scores.csv`, `plots/channel_NN.svg`, `plots/score.svg` |
//! | `ablate`| `ablation.json`, `ablation.txt`, `rows/<name>/report.json` |

pub mod commands;
pub mod config;
pub mod plot;

pub use commands::{cmd_ablate, cmd_eval, cmd_synth, cmd_train, prepare, AblationRow, EvalSummary, TrainSummary};
pub use config::RunConfig;
