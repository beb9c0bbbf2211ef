//! Multi-period self-adaptive patching.
//!
//! Every period window is cut into the same number of patches by choosing
//! the stride `K = max(1, floor(n / target))` and patch length `L = alpha * K`
//! per window. Because of the floor, the window is first fitted to exactly
//! `(target + alpha - 2) * K` values (`target * K` for the usual `alpha = 2`):
//! older values are dropped, or short windows are left-padded with their
//! first value.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{MlfError, Result};
use crate::tensor::Tensor;

/// Patch geometry of one period.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchParams {
    pub period: usize,
    pub window_len: usize,
    pub stride: usize,
    pub patch_len: usize,
    /// Window length after fitting, before the trailing stride padding.
    pub fitted_len: usize,
    pub num_patches: usize,
}

/// Adaptive geometry: exactly `target` patches for any window length.
pub fn derive_patch_params(period: usize, window_len: usize, target: usize, alpha: usize) -> PatchParams {
    let stride = (window_len / target).max(1);
    PatchParams {
        period,
        window_len,
        stride,
        patch_len: alpha * stride,
        fitted_len: (target + alpha.max(1) - 2) * stride,
        num_patches: target,
    }
}

/// Fixed geometry (adaptive patching disabled). Windows shorter than a patch
/// are left-padded to one patch length.
pub fn fixed_patch_params(period: usize, window_len: usize, patch_len: usize, stride: usize) -> PatchParams {
    let fitted_len = window_len.max(patch_len);
    PatchParams {
        period,
        window_len,
        stride,
        patch_len,
        fitted_len,
        num_patches: patch_count(fitted_len, patch_len, stride),
    }
}

/// `floor((n - L) / K) + 2`: patches produced after appending `K` copies of
/// the last value.
pub fn patch_count(len: usize, patch_len: usize, stride: usize) -> usize {
    let d = (len as isize - patch_len as isize).div_euclid(stride as isize);
    (d + 2).max(0) as usize
}

/// Keeps the most recent `target_len` values, or left-pads with the first
/// value when the window is shorter.
pub fn fit_length(window: &[f64], target_len: usize) -> Vec<f64> {
    let n = window.len();
    if n >= target_len {
        window[n - target_len..].to_vec()
    } else {
        let first = window.first().copied().unwrap_or(0.0);
        let mut out = Vec::with_capacity(target_len);
        out.resize(target_len - n, first);
        out.extend_from_slice(window);
        out
    }
}

/// Appends `stride` copies of the last value and extracts windows of
/// `patch_len` at step `stride`. Returns the patches row by row, shape
/// `[num_patches, patch_len]`.
pub fn patchify(window: &[f64], patch_len: usize, stride: usize) -> Result<Tensor> {
    let n = window.len();
    if n == 0 || stride == 0 || patch_len == 0 || n + stride < patch_len {
        return Err(MlfError::DegenerateInput(alloc::format!(
            "cannot patch {n} values with length {patch_len} and stride {stride}"
        )));
    }
    let count = patch_count(n, patch_len, stride);
    let last = window[n - 1];
    let at = |i: usize| if i < n { window[i] } else { last };
    let mut data = Vec::with_capacity(count * patch_len);
    for p in 0..count {
        let start = p * stride;
        data.extend((start..start + patch_len).map(at));
    }
    Tensor::new(&[count, patch_len], data)
}

/// Fits and patches a batch of windows of one period: `windows` holds
/// `batch` rows of `params.window_len` values. Output `[batch, N, L]`.
pub fn patch_batch(windows: &[f64], batch: usize, params: &PatchParams) -> Result<Tensor> {
    if windows.len() != batch * params.window_len {
        return Err(MlfError::mismatch("patch_batch", &[windows.len()], &[batch, params.window_len]));
    }
    let mut data = Vec::with_capacity(batch * params.num_patches * params.patch_len);
    for row in windows.chunks(params.window_len) {
        let fitted = fit_length(row, params.fitted_len);
        let p = patchify(&fitted, params.patch_len, params.stride)?;
        debug_assert_eq!(p.shape()[0], params.num_patches);
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[batch, params.num_patches, params.patch_len], data)
}

/// `patches · W_p + W_pos`: `[B, N, L] · [L, D] + [N, D] -> [B, N, D]`.
pub fn embed(tape: &mut Tape, patches: Var, projection: Var, position: Var) -> Result<Var> {
    let s = tape.shape(patches).to_vec();
    let (b, n, l) = match *s.as_slice() {
        [b, n, l] => (b, n, l),
        _ => return Err(MlfError::invalid("embed", &s, "expected [batch, patches, patch_len]")),
    };
    let ps = tape.shape(projection).to_vec();
    if ps.len() != 2 || ps[0] != l {
        return Err(MlfError::mismatch("embed", &s, &ps));
    }
    let flat = tape.reshape(patches, &[b * n, l])?;
    let proj = tape.matmul(flat, projection)?;
    let proj = tape.reshape(proj, &[b, n, ps[1]])?;
    tape.add_broadcast(proj, position)
}
