//! Training regimes, sampling and evaluation, the ablation grid, the
//! mask-robustness sweep, and run records.

pub mod ablation;
pub mod checks;
pub mod eval;
pub mod io;
pub mod robustness;
pub mod train;
pub mod workspace;

pub use ablation::{compare_regimes, run_ablation, AblationTable, RegimeComparison};
pub use eval::{sample_metrics, Editor, EditOutput, MaskSource, MetricsReport};
pub use io::{MetricsRow, RunManifest};
pub use robustness::{robustness_sweep, run_robustness, RobustnessTable};
pub use train::{adopt_backbone, init_store, pretrain_backbone, train_variant, StepLog, Trained, VariantConfig};
pub use workspace::{Checkpoint, Workspace};
