//! Automated PD-L1 tumor cell (TC) scoring.
//!
//! The crate covers the whole pipeline: a small reverse-mode tensor engine,
//! the three region detectors (an auxiliary-classifier GAN with a
//! spectrally normalized discriminator, a fully-convolutional VGG-style
//! classifier and its autoencoder semi-supervised variant), tissue detection
//! and patch extraction, the training loops, sliding-window slide inference
//! with pixel-ratio TC scoring, rater-concordance statistics, and a seeded
//! synthetic slide generator used as a ground-truth oracle.

pub mod tensor;
pub mod models;
pub mod datapipe;
pub mod stats;
pub mod inference;
pub mod io;
pub mod synthslide;
pub mod training;
