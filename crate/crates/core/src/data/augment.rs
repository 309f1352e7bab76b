//! Flip / pad-crop augmentation with explicit parameters so the same draw
//! can be applied to a real batch (as arrays) and a synthetic batch (as
//! tape nodes, differentiable back to the synthetic pixels). Cutout is
//! evaluation-only.

use crate::error::{HmdcError, Result};
use hmdc_tensor::{NodeId, Scalar, Tape};
use ndarray::{s, Array4};
use rand::Rng;

/// One draw of the paired transform. Identity is `flip: false, shift 0/0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugParams {
    pub flip: bool,
    /// Crop shift in pixels, in `[-pad, pad]`; 0 keeps the image centered.
    pub shift_y: isize,
    pub shift_x: isize,
    pub pad: usize,
}

impl AugParams {
    pub fn identity(pad: usize) -> Self {
        AugParams {
            flip: false,
            shift_y: 0,
            shift_x: 0,
            pad,
        }
    }

    pub fn draw(rng: &mut impl Rng, pad: usize) -> Self {
        let p = pad as isize;
        AugParams {
            flip: rng.gen_bool(0.5),
            shift_y: rng.gen_range(-p..=p),
            shift_x: rng.gen_range(-p..=p),
            pad,
        }
    }

    /// Pad-crop then flip on plain arrays.
    pub fn apply_arrays<T: Scalar>(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let oy = (self.pad as isize + self.shift_y) as usize;
        let ox = (self.pad as isize + self.shift_x) as usize;
        let mut out = Array4::<T>::zeros((n, c, h, w));
        // source rows in the virtual padded image: [oy, oy+h) maps to x rows [oy-pad, ...)
        for dst_i in 0..h {
            let src_i = dst_i as isize + oy as isize - self.pad as isize;
            if src_i < 0 || src_i >= h as isize {
                continue;
            }
            for dst_j in 0..w {
                let src_j = dst_j as isize + ox as isize - self.pad as isize;
                if src_j < 0 || src_j >= w as isize {
                    continue;
                }
                let out_j = if self.flip { w - 1 - dst_j } else { dst_j };
                out.slice_mut(s![.., .., dst_i, out_j])
                    .assign(&x.slice(s![.., .., src_i as usize, src_j as usize]));
            }
        }
        out
    }

    /// Same transform as tape ops (differentiable through to the input node).
    pub fn apply_node<T: Scalar>(&self, tape: &Tape<T>, x: NodeId) -> NodeId {
        let shape = tape.shape(x);
        let (h, w) = (shape[2], shape[3]);
        let p = self.pad;
        let oy = (p as isize + self.shift_y) as usize;
        let ox = (p as isize + self.shift_x) as usize;
        let padded = tape.pad_zero(tape.pad_zero(x, 2, p, p), 3, p, p);
        let cropped = tape.slice_axis(tape.slice_axis(padded, 2, oy, oy + h), 3, ox, ox + w);
        if self.flip {
            tape.flip(cropped, 3)
        } else {
            cropped
        }
    }
}

/// Apply one shared draw to both batches; fails on mismatched (C, H, W).
pub fn apply_paired<T: Scalar>(
    real: &Array4<T>,
    synth: &Array4<T>,
    rng: &mut impl Rng,
    pad: usize,
) -> Result<(Array4<T>, Array4<T>, AugParams)> {
    let (_, rc, rh, rw) = real.dim();
    let (_, sc, sh, sw) = synth.dim();
    if (rc, rh, rw) != (sc, sh, sw) {
        return Err(HmdcError::Shape(format!(
            "paired augmentation shape mismatch: ({rc},{rh},{rw}) vs ({sc},{sh},{sw})"
        )));
    }
    let params = AugParams::draw(rng, pad);
    Ok((params.apply_arrays(real), params.apply_arrays(synth), params))
}

/// Default crop padding for a given image height.
pub fn default_pad(h: usize) -> usize {
    (h / 8).max(1)
}

/// Zero a random square of side `h/2` per image (normalized space, so zero
/// is the per-channel mean). Evaluation-time only.
pub fn cutout_inplace<T: Scalar>(x: &mut Array4<T>, rng: &mut impl Rng) {
    let (n, _, h, w) = x.dim();
    let size = (h / 2).max(1);
    for i in 0..n {
        let cy = rng.gen_range(0..h);
        let cx = rng.gen_range(0..w);
        let y0 = cy.saturating_sub(size / 2);
        let x0 = cx.saturating_sub(size / 2);
        let y1 = (y0 + size).min(h);
        let x1 = (x0 + size).min(w);
        x.slice_mut(s![i, .., y0..y1, x0..x1]).fill(T::zero());
    }
}

/// Per-image independent flips and crops for evaluation-time training.
pub fn eval_augment<T: Scalar>(
    x: &Array4<T>,
    rng: &mut impl Rng,
    flip: bool,
    crop: bool,
    cutout: bool,
) -> Array4<T> {
    let (n, _, h, _) = x.dim();
    let pad = default_pad(h);
    let mut out = x.clone();
    for i in 0..n {
        let params = AugParams {
            flip: flip && rng.gen_bool(0.5),
            shift_y: if crop { rng.gen_range(-(pad as isize)..=pad as isize) } else { 0 },
            shift_x: if crop { rng.gen_range(-(pad as isize)..=pad as isize) } else { 0 },
            pad,
        };
        let one = x.slice(s![i..i + 1, .., .., ..]).to_owned();
        out.slice_mut(s![i..i + 1, .., .., ..])
            .assign(&params.apply_arrays(&one));
    }
    if cutout {
        cutout_inplace(&mut out, rng);
    }
    out
}
