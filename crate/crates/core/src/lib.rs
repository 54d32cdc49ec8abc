//! Life-long laser SLAM on rasterized LIDAR images.
//!
//! Scans are reduced to elevation images seen by a virtual pinhole camera,
//! tracked with binary features and closed-form rigid registration, grouped
//! into local maps that are bundle-adjusted and rasterized, and recognised
//! again through a bag-of-words index built only from those local-map images.

pub mod bench_io;
pub mod features;
pub mod geometry;
pub mod mapping;
pub mod odometry;
pub mod optim;
pub mod par;
pub mod place_recognition;
pub mod raster;
