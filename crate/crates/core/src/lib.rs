//! Weakly supervised CT lesion detection toolkit: anchor search, RECIST
//! pseudo-masks via GrabCut, and FROC evaluation with mask-coherence
//! score calibration.
//!
//! ```
//! use lesionkit::geometry::{iou, BBox};
//!
//! let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
//! let b = BBox::new(5.0, 5.0, 15.0, 15.0).unwrap();
//! assert!((iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
//! ```

pub mod anchor_opt;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod ingest;
pub mod maskgen;
pub mod synthetic;

pub use anchor_opt::{de_optimize, AnchorConfig, AnchorGenome, DeSettings};
pub use eval::{calibrate, froc_curve, sensitivity_at_fp, Detection, FrocCurve, GroundTruthLesion};
pub use geometry::{iou, order_quadrilateral, BBox, Point, Quadrilateral, RecistDiameters};
pub use grid::Grid;
pub use maskgen::{build_trimap, grabcut, GrabCutOutput, GrabCutParams, Trimap};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/anchor-search.md")]
    mod anchor_search {}
    #[doc = include_str!("../../../book/src/pseudo-masks.md")]
    mod pseudo_masks {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/ingest.md")]
    mod ingest {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
