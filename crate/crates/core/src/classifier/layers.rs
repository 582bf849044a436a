//! Forward and backward kernels for the fixed architecture.

use super::{log_prob, softmax, ClassifierModel, Params, Prediction, CONV1_FILTERS, CONV2_FILTERS, KERNEL};
use crate::image::CHANNELS;

/// 3x3 convolution, stride 1, zero padding 1, plus bias, on an HWC tensor.
fn conv3x3(input: &[f64], side: usize, cin: usize, weights: &[f64], bias: &[f64], out: &mut [f64]) {
    let cout = bias.len();
    for y in 0..side {
        for x in 0..side {
            let o = &mut out[(y * side + x) * cout..(y * side + x + 1) * cout];
            o.copy_from_slice(bias);
            for ky in 0..KERNEL {
                let iy = y + ky;
                if iy < 1 || iy > side {
                    continue;
                }
                let iy = iy - 1;
                for kx in 0..KERNEL {
                    let ix = x + kx;
                    if ix < 1 || ix > side {
                        continue;
                    }
                    let ix = ix - 1;
                    let px = &input[(iy * side + ix) * cin..(iy * side + ix + 1) * cin];
                    let wbase = (ky * KERNEL + kx) * cin * cout;
                    for (c, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let w = &weights[wbase + c * cout..wbase + (c + 1) * cout];
                        for (acc, &wv) in o.iter_mut().zip(w) {
                            *acc += v * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Backward of [`conv3x3`]. Accumulates into `dw`/`db` when given and into
/// `din` when given.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    side: usize,
    cin: usize,
    weights: &[f64],
    cout: usize,
    dout: &[f64],
    mut grads: Option<(&mut [f64], &mut [f64])>,
    mut din: Option<&mut [f64]>,
) {
    for y in 0..side {
        for x in 0..side {
            let g = &dout[(y * side + x) * cout..(y * side + x + 1) * cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            if let Some((_, db)) = grads.as_mut() {
                for (b, &gv) in db.iter_mut().zip(g) {
                    *b += gv;
                }
            }
            for ky in 0..KERNEL {
                let iy = y + ky;
                if iy < 1 || iy > side {
                    continue;
                }
                let iy = iy - 1;
                for kx in 0..KERNEL {
                    let ix = x + kx;
                    if ix < 1 || ix > side {
                        continue;
                    }
                    let ix = ix - 1;
                    let pbase = (iy * side + ix) * cin;
                    let wbase = (ky * KERNEL + kx) * cin * cout;
                    for c in 0..cin {
                        let wi = wbase + c * cout;
                        if let Some((dw, _)) = grads.as_mut() {
                            let v = input[pbase + c];
                            if v != 0.0 {
                                for (d, &gv) in dw[wi..wi + cout].iter_mut().zip(g) {
                                    *d += v * gv;
                                }
                            }
                        }
                        if let Some(din) = din.as_deref_mut() {
                            let s: f64 = weights[wi..wi + cout].iter().zip(g).map(|(w, gv)| w * gv).sum();
                            din[pbase + c] += s;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max-pool over an HWC tensor. Ties go to the first maximal element in
/// scan order (top-left, top-right, bottom-left, bottom-right). Returns the
/// pooled tensor and, per output, the flat index of the winning input.
fn maxpool2(input: &[f64], side: usize, ch: usize) -> (Vec<f64>, Vec<u32>) {
    let half = side / 2;
    let mut out = vec![0.0; half * half * ch];
    let mut arg = vec![0u32; half * half * ch];
    for y in 0..half {
        for x in 0..half {
            for c in 0..ch {
                let mut best_i = ((2 * y) * side + 2 * x) * ch + c;
                let mut best = input[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * y + dy) * side + 2 * x + dx) * ch + c;
                    if input[i] > best {
                        best = input[i];
                        best_i = i;
                    }
                }
                let o = (y * half + x) * ch + c;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

pub(super) struct Trace {
    side: usize,
    /// Post-ReLU conv1 output, side x side x 8.
    a1: Vec<f64>,
    p1: Vec<f64>,
    p1_arg: Vec<u32>,
    /// Post-ReLU conv2 output, side/2 x side/2 x 16.
    a2: Vec<f64>,
    p2: Vec<f64>,
    p2_arg: Vec<u32>,
    pub(super) logits: Vec<f64>,
}

impl Trace {
    pub(super) fn run(model: &ClassifierModel, input: &[f64]) -> Trace {
        let side = model.image_side;
        let half = side / 2;
        let p = &model.params;

        let mut a1 = vec![0.0; side * side * CONV1_FILTERS];
        conv3x3(input, side, CHANNELS, &p.conv1_w, &p.conv1_b, &mut a1);
        relu_in_place(&mut a1);
        let (p1, p1_arg) = maxpool2(&a1, side, CONV1_FILTERS);

        let mut a2 = vec![0.0; half * half * CONV2_FILTERS];
        conv3x3(&p1, half, CONV1_FILTERS, &p.conv2_w, &p.conv2_b, &mut a2);
        relu_in_place(&mut a2);
        let (p2, p2_arg) = maxpool2(&a2, half, CONV2_FILTERS);

        let classes = model.class_count;
        let mut logits = p.dense_b.clone();
        for (f, &v) in p2.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let row = &p.dense_w[f * classes..(f + 1) * classes];
            for (l, &w) in logits.iter_mut().zip(row) {
                *l += v * w;
            }
        }
        Trace { side, a1, p1, p1_arg, a2, p2, p2_arg, logits }
    }

    pub(super) fn prediction(self) -> Prediction {
        let probs = softmax(&self.logits);
        Prediction { logits: self.logits, probs }
    }

    pub(super) fn signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        sig.extend(self.a1.iter().map(|&v| (v > 0.0) as u32));
        sig.extend(self.a2.iter().map(|&v| (v > 0.0) as u32));
        sig.extend_from_slice(&self.p1_arg);
        sig.extend_from_slice(&self.p2_arg);
        sig
    }
}

/// Cross-entropy of one sample; accumulates unscaled parameter gradients
/// into `pgrads` and pixel gradients into `dx` when requested.
pub(super) fn sample_backward(
    model: &ClassifierModel,
    input: &[f64],
    label: usize,
    pgrads: Option<&mut Params>,
    dx: Option<&mut [f64]>,
) -> f64 {
    let t = Trace::run(model, input);
    let loss = -log_prob(&t.logits, label);
    let mut dlogits = softmax(&t.logits);
    dlogits[label] -= 1.0;
    backward_from(model, &t, input, &dlogits, pgrads, dx);
    loss
}

/// Backpropagates an upstream gradient on the logits through the network.
pub(super) fn backward_from(
    model: &ClassifierModel,
    t: &Trace,
    input: &[f64],
    dlogits: &[f64],
    mut pgrads: Option<&mut Params>,
    dx: Option<&mut [f64]>,
) {
    let side = t.side;
    let half = side / 2;
    let classes = model.class_count;
    let p = &model.params;

    // Dense.
    let mut dp2 = vec![0.0; t.p2.len()];
    for (f, d) in dp2.iter_mut().enumerate() {
        let row = &p.dense_w[f * classes..(f + 1) * classes];
        *d = row.iter().zip(dlogits).map(|(w, g)| w * g).sum();
    }
    if let Some(g) = pgrads.as_deref_mut() {
        for (b, d) in g.dense_b.iter_mut().zip(dlogits) {
            *b += d;
        }
        for (f, &v) in t.p2.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let row = &mut g.dense_w[f * classes..(f + 1) * classes];
            for (w, d) in row.iter_mut().zip(dlogits) {
                *w += v * d;
            }
        }
    }

    // Pool 2 and ReLU 2.
    let mut dz2 = vec![0.0; t.a2.len()];
    for (o, &src) in t.p2_arg.iter().enumerate() {
        if t.a2[src as usize] > 0.0 {
            dz2[src as usize] += dp2[o];
        }
    }

    // Conv 2.
    let mut dp1 = vec![0.0; t.p1.len()];
    {
        let grads = pgrads.as_deref_mut().map(|g| (g.conv2_w.as_mut_slice(), g.conv2_b.as_mut_slice()));
        conv3x3_backward(&t.p1, half, CONV1_FILTERS, &p.conv2_w, CONV2_FILTERS, &dz2, grads, Some(&mut dp1));
    }

    // Pool 1 and ReLU 1.
    let mut dz1 = vec![0.0; t.a1.len()];
    for (o, &src) in t.p1_arg.iter().enumerate() {
        if t.a1[src as usize] > 0.0 {
            dz1[src as usize] += dp1[o];
        }
    }

    // Conv 1.
    if pgrads.is_some() || dx.is_some() {
        let grads = pgrads.map(|g| (g.conv1_w.as_mut_slice(), g.conv1_b.as_mut_slice()));
        conv3x3_backward(input, side, CHANNELS, &p.conv1_w, CONV1_FILTERS, &dz1, grads, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_ties_pick_first() {
        // One channel, 2x2 input of equal values.
        let (out, arg) = maxpool2(&[1.0, 1.0, 1.0, 1.0], 2, 1);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
        let (_, arg) = maxpool2(&[0.0, 2.0, 2.0, 1.0], 2, 1);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn conv_identity_kernel() {
        // Single channel in/out, centre tap 1 reproduces the input.
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let input: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut out = vec![0.0; 16];
        conv3x3(&input, 4, 1, &w, &[0.5], &mut out);
        for (o, i) in out.iter().zip(&input) {
            assert_eq!(*o, i + 0.5);
        }
    }

    #[test]
    fn conv_zero_padding_edges() {
        // All-ones 3x3 kernel on an all-ones 3x3 image: corner 4, edge 6, centre 9.
        let w = vec![1.0; 9];
        let mut out = vec![0.0; 9];
        conv3x3(&[1.0; 9], 3, 1, &w, &[0.0], &mut out);
        assert_eq!(out, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }
}
