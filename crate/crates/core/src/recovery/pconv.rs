use deocc_tensor::{kernels, Graph, Tensor, Var};

/// Window sums of `mask` and the renormalisation factor they imply.
///
/// Returns `(ratio, valid)`, both `N×1×H'×W'`: `ratio = |window|/ΣM` where
/// `ΣM > 0` and 0 elsewhere; `valid` is the propagated mask. `|window|`
/// counts in-canvas entries only, so padding is neither valid nor counted.
fn coverage(mask: &Tensor, k: usize, stride: usize, pad: usize) -> (Tensor, Tensor) {
    let cm = mask.shape()[1];
    let ones = Tensor::ones([1, cm, k, k]);
    let sums = kernels::conv2d(mask, &ones, None, stride, pad);
    let window = kernels::conv2d(&Tensor::ones(mask.shape().to_vec()), &ones, None, stride, pad);
    let ratio = sums.zip_map(&window, |s, n| if s > 0.5 { n / s } else { 0.0 });
    let valid = sums.map(|s| if s > 0.5 { 1.0 } else { 0.0 });
    (ratio, valid)
}

/// Partial convolution with a validity mask.
///
/// `mask` is `N×1×H×W` (shared by every input channel) or `N×C×H×W`. Per
/// window the output is `Wᵀ(X⊙M)·|window|/ΣM + b` when the window holds any
/// valid entry and exactly 0 otherwise; an all-ones mask reproduces the
/// zero-padded dense convolution. The second value is the updated
/// single-channel mask: 1 wherever the window saw a valid entry.
pub fn partial_conv<'g>(
    x: Var<'g>,
    mask: &Tensor,
    weight: Var<'g>,
    bias: Var<'g>,
    stride: usize,
    pad: usize,
) -> (Var<'g>, Tensor) {
    let g = x.graph();
    let ws = weight.shape();
    debug_assert_eq!(ws[2], ws[3], "square kernels only");
    let (ratio, valid) = coverage(mask, ws[2], stride, pad);
    let masked = x * g.input(mask.clone());
    let raw = masked.conv2d(weight, None, stride, pad);
    let b = bias.reshape([1, ws[0], 1, 1]);
    let out = (raw * g.input(ratio) + b) * g.input(valid.clone());
    (out, valid)
}

/// [`partial_conv`] on plain tensors.
pub fn partial_conv_eval(
    x: &Tensor,
    mask: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor) {
    let g = Graph::new();
    let (out, valid) = partial_conv(
        g.input(x.clone()),
        mask,
        g.input(weight.clone()),
        g.input(bias.clone()),
        stride,
        pad,
    );
    ((*out.value()).clone(), valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use deocc_tensor::Init;

    #[test]
    fn all_valid_is_dense_convolution() {
        let mut init = Init::new(2);
        let x = init.uniform([2, 3, 7, 6], -1.0, 1.0);
        let (w, b) = init.conv(4, 3, 3);
        let (out, valid) = partial_conv_eval(&x, &Tensor::ones([2, 1, 7, 6]), &w, &b, 1, 1);
        let dense = kernels::conv2d(&x, &w, Some(&b), 1, 1);
        for (a, d) in out.data().iter().zip(dense.data()) {
            assert!((a - d).abs() < 1e-12);
        }
        assert!(valid.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn all_invalid_is_zero() {
        let mut init = Init::new(3);
        let x = init.uniform([1, 2, 5, 5], -1.0, 1.0);
        let (w, b) = init.conv(3, 2, 3);
        let (out, valid) = partial_conv_eval(&x, &Tensor::zeros([1, 2, 5, 5]), &w, &b, 2, 1);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(valid.data().iter().all(|&v| v == 0.0));
    }
}
