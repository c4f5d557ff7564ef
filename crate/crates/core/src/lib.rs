//! Exact linear restrictions of piecewise-linear neural networks.
//!
//! Given a network built from dense, convolutional, normalization, ReLU and
//! MaxPool layers and a segment `Q -> R` in its input space, the engine finds
//! every point along the segment where the network switches affine piece.
//! That partition makes several quantities exact rather than sampled:
//! integrated-gradient attributions, the predicted class along the segment,
//! and the number of linear regions crossed per unit of distance.
//!
//! ```
//! use linrestrict::{exactline_network, Dense, Layer, LineQuery, Network, Tensor};
//!
//! let dense = Dense::from_rows(vec![vec![-1.7, 1.0], vec![2.0, -1.3]], vec![3.0, 3.0]).unwrap();
//! let net = Network::new(vec![2], vec![Layer::Dense(dense), Layer::Relu]).unwrap();
//! let query = LineQuery::new(
//!     Tensor::vector(vec![20.0, 30.0]).unwrap(),
//!     Tensor::vector(vec![30.0, 50.0]).unwrap(),
//! )
//! .unwrap();
//! let line = exactline_network(&net, &query).unwrap();
//! assert_eq!(line.endpoints().len(), 4);
//! ```

pub mod analysis;
pub mod attributions;
pub mod engine;
pub mod error;
pub mod io;
pub mod network;
pub mod tensor;

pub use analysis::{
    decision_segments, density_with_deviation, fgsm_direction, gradient_deviation, partition_density,
    random_direction, ClassSegment, DensityReport,
};
pub use attributions::{
    exact_ig, find_m_tilde, relative_error, riemann_ig, samples_to_tolerance, AttributionReport, Method,
    SampleSearchResult, Scheme, SearchParams,
};
pub use engine::{
    canonicalize, exactline_affine, exactline_network, exactline_network_with, exactline_prefix,
    interpolate_output, EngineOptions, Endpoint, LineQuery, PartitionedLine,
};
pub use error::{Error, Result};
pub use network::{fold_affine_layers, validate_network, Conv2d, Dense, GradientEvaluator, Layer, Network, PoolGeometry};
pub use tensor::Tensor;
