pub mod arrays;
pub mod cams;
pub mod data;
pub mod decoder;
pub mod domain;
pub mod error;
pub mod imageio;
pub mod localize;
pub mod losses;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod pseudo;
pub mod rng;
pub mod temporal;

pub use domain::{iou, BoundingBox, Cam, Frame, ImageDomain, SoftmaxMaps, VideoLabel};
pub use error::{Result, TcamError};
