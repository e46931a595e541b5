//! Data-driven prescribed-time control on Koopman-lifted models.
//!
//! The crate covers the full pipeline:
//!
//! 1. [`plants`] — reference nonlinear plants and excitation signals,
//! 2. [`simulator`] — fixed-step integration and data collection,
//! 3. [`dictionary`] — observable dictionaries that lift plant states,
//! 4. [`sysid`] — EDMDc least squares, discrete-to-continuous conversion and
//!    the companion-form realization,
//! 5. [`uncertainty`] — residual computation and the linear uncertainty bound,
//! 6. [`controller`] — the prescribed-time adaptive backstepping law,
//! 7. [`analysis`] — Lyapunov-based certification of closed-loop runs.
//!
//! ```
//! use nalgebra::{DMatrix, DVector};
//! use koopman_ptc::controller::{ControllerConfig, RegressorSpec};
//! use koopman_ptc::dictionary::{Dictionary, DictionarySpec};
//! use koopman_ptc::plants::{ExcitationSignal, Plant};
//! use koopman_ptc::simulator::{collect_data, run_closed_loop, DEFAULT_ESCAPE_RADIUS};
//! use koopman_ptc::sysid::{fit_edmdc, to_companion, KoopmanModel};
//! use koopman_ptc::uncertainty::{compute_residuals, fit_bound};
//!
//! // offline: excite the plant, fit the lifted model, bound its error
//! let plant = Plant::van_der_pol(1.0, 0.1);
//! let excitation = ExcitationSignal::prbs_default(7);
//! let data = collect_data(&plant, &excitation, 60.0, 0.01,
//!                         &DVector::zeros(2), DEFAULT_ESCAPE_RADIUS)?;
//! let (train, validation) = data.split(0.8)?;
//! let dict = Dictionary::build(&DictionarySpec::identity(2), Some(&train.states))?;
//! let fit = fit_edmdc(&train, &dict, 1e-8)?;
//! let mut model = KoopmanModel::assemble(fit, dict, train.dt);
//! let (delta0, delta1) = fit_bound(&compute_residuals(&model, &validation)?);
//! model.set_uncertainty_bound(delta0, delta1)?;
//! let companion = to_companion(&model.a, &model.b)?;
//!
//! // online: drive the plant to the origin within the prescribed time
//! let cfg = ControllerConfig {
//!     prescribed_time: 5.0,
//!     gains: DVector::from_element(companion.dim(), 3.0),
//!     gamma: DMatrix::from_element(1, 1, 5.0),
//!     guard_fraction: 0.01,
//!     regressor: RegressorSpec::PlantPhi,
//!     theta_hat0: DVector::zeros(1),
//! };
//! let x0 = DVector::from_vec(vec![2.0, 0.0]);
//! let run = run_closed_loop(&plant, &model, &companion, &cfg, &x0, 10.0, 1e-3)?;
//! assert!(run.is_clean());
//! assert!(run.record.x.last().unwrap().norm() < 0.1);
//! # Ok::<(), koopman_ptc::Error>(())
//! ```

pub mod analysis;
pub mod controller;
pub mod dictionary;
pub mod error;
mod jet;
pub mod matfun;
pub mod plants;
pub mod simulator;
pub mod sysid;
pub mod uncertainty;

pub use analysis::StabilityReport;
pub use controller::{ControllerConfig, ControllerState};
pub use dictionary::Dictionary;
pub use error::{Error, Result};
pub use plants::{ExcitationSignal, Plant};
pub use simulator::TrajectoryRecord;
pub use sysid::{CompanionRealization, KoopmanModel, SnapshotDataset};
