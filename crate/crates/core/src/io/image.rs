//! Raw latent dumps and 8-bit grayscale previews.

use crate::diffkit::Tensor;
use crate::error::{Error, Result};

/// Little-endian f64 values of `t` in row-major order, with no header.
pub fn latent_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Binary portable graymap (P5) of channel 0 of a `[C, H, W]` latent,
/// min-max normalized to 0..=255. A constant channel maps to 0.
pub fn preview_pgm(latent: &Tensor) -> Result<Vec<u8>> {
    let &[_, h, w] = latent.shape() else {
        return Err(Error::contract(format!(
            "preview expects a [C, H, W] latent, got {:?}",
            latent.shape()
        )));
    };
    let ch = &latent.data()[..h * w];
    let (lo, hi) = ch
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(ch.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}
