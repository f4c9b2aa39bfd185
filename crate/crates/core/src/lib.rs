//! Radar-LiDAR fusion 3D object detection with mutual indicative and shape enhancement.

pub mod bev;
pub mod boxes;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod head;
pub mod irb;
pub mod model;
pub mod nn;
pub mod pillarize;
pub mod salc;
pub mod synth;
pub mod tensor;
pub mod train;

pub use boxes::{Box3D, Detection, ObjectClass};
pub use config::Config;
pub use data::Frame;
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::{Graph, Tensor, Var};
