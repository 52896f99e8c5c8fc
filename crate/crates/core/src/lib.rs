//! Semi-supervised adverse-weather restoration driven by vision-language judges.

pub mod assessment;
pub mod backends;
pub mod config;
pub mod error;
pub mod exec;
pub mod image;
pub mod model;
pub mod objectives;
pub mod pseudodb;
pub mod rng;
pub mod semantics;
pub mod toy;
pub mod trainer;
pub mod weatherprompt;

pub use error::{Error, Result};
pub use exec::Exec;
pub use image::{Image, ImageSample, LabeledPair, Source, UnlabeledSet, WeatherTag};
