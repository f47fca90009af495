use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by any fallible operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image dimensions {width}x{height}: {reason}")]
    InvalidImage {
        width: usize,
        height: usize,
        reason: String,
    },

    #[error("pad exceeds image: pad {pad} >= dimension {dim}")]
    PadExceedsImage { pad: usize, dim: usize },

    #[error("crop rectangle {h}x{w} at ({top},{left}) out of bounds for {img_h}x{img_w} image")]
    CropOutOfBounds {
        top: usize,
        left: usize,
        h: usize,
        w: usize,
        img_h: usize,
        img_w: usize,
    },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("kernel {kernel}x{kernel} does not fit inside {img_h}x{img_w} image in valid mode")]
    KernelTooLarge {
        kernel: usize,
        img_h: usize,
        img_w: usize,
    },

    #[error("dimension mismatch in {context}: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    DimensionMismatch {
        context: &'static str,
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("objective returned non-finite {what} at iteration {iteration}")]
    NonFiniteObjective { what: &'static str, iteration: usize },

    #[error("degenerate kernel")]
    DegenerateKernel,

    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("failed to encode image {path}: {source}")]
    ImageEncode {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("unsupported image format for {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("parse error in {path} (line {line}): {msg}")]
    ParseFile {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("OCR command failed (exit {status}): {stderr}")]
    OcrCommandFailed { status: i32, stderr: String },

    #[error("OCR command timed out after {seconds} s")]
    OcrTimeout { seconds: u64 },

    #[error("OCR command could not be spawned: {0}")]
    OcrSpawn(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
