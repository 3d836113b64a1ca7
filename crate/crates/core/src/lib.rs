//! Neighbor-attention feature aggregation.
//!
//! Given `N` feature vectors, each layer replaces every vector with a
//! softmax-weighted average of its reciprocal nearest neighbors, where the
//! neighborhoods come from a cheap low-rank affinity built through a handful
//! of landmark rows. The crate also ships the numerical checks behind the
//! landmark approximation, a synthetic re-identification evaluator and an
//! analytic cost model.
//!
//! ```
//! use nformer::linalg::Matrix;
//! use nformer::stack::{nformer_forward, LayerWeights, NFormerConfig};
//!
//! let z = Matrix::from_fn(30, 8, |i, j| ((i * 7 + j * 3) % 11) as f64);
//! let cfg = NFormerConfig { d: 8, l: 4, k: 5, layers: 2, ..NFormerConfig::default() };
//! let weights = vec![LayerWeights::identity(8); 2];
//! let out = nformer_forward(&z, &weights, &cfg).unwrap();
//! assert_eq!(out.shape(), (30, 8));
//! ```
//!
//! Modules:
//!
//! - [`linalg`]: dense matrices, counted products, symmetric eigensolver.
//! - [`laa`]: projections, landmark sampling, dense and landmark affinities.
//! - [`rns`]: top-k and reciprocal masks, masked softmax, aggregation.
//! - [`stack`]: layers and the multi-layer forward pass.
//! - [`spectral`]: cosine identities for landmark selections.
//! - [`retrieval`]: synthetic identities, ranking, CMC and mAP.
//! - [`flops`], [`bench`]: analytic and measured cost.
//! - [`io`]: feature, weight and label files.

pub mod bench;
pub mod error;
pub mod flops;
pub mod io;
pub mod laa;
pub mod linalg;
pub mod retrieval;
pub mod rns;
pub mod spectral;
pub mod stack;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use stack::{nformer_forward, LayerWeights, NFormerConfig};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/landmark-affinity.md")]
    mod landmark_affinity {}
    #[doc = include_str!("../../../book/src/reciprocal-neighbors.md")]
    mod reciprocal_neighbors {}
    #[doc = include_str!("../../../book/src/stack.md")]
    mod stack {}
    #[doc = include_str!("../../../book/src/spectral.md")]
    mod spectral {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    mod cost_model {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
