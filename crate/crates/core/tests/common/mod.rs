use smrnn::{Tape, Tensor};

pub const OP_COUNT: usize = 12;

/// A differentiable op applied to a random point, reduced to a scalar with
/// fixed random weights so that no gradient cancels by symmetry.
pub fn op_loss(op: usize, x: &[f64], y: &[f64], w: &[f64], slopes: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len();
    let mut tape = Tape::new();
    let xv = tape.leaf(&Tensor::vector(x.to_vec()).unwrap().with_requires_grad(true));
    let yv = tape.constant(vec![n], y.to_vec()).unwrap();
    let out = match op {
        0 => tape.add(xv, yv),
        1 => tape.sub(yv, xv),
        2 => tape.mul(xv, yv),
        3 => tape.relu(xv),
        4 => {
            let s = tape.constant(vec![n], slopes.to_vec()).unwrap();
            tape.prelu(xv, s)
        }
        5 => tape.sigmoid(xv),
        6 => tape.tanh(xv),
        7 => tape.clamp(xv, -0.5, 0.5),
        8 => tape.scale(xv, -1.7),
        9 => {
            let wm =
                tape.constant(vec![3, n], (0..3 * n).map(|i| y[i % n] * (i as f64 + 1.0) / 3.0).collect()).unwrap();
            let b = tape.constant(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
            tape.affine(xv, wm, b)
        }
        10 => tape.concat(&[yv, xv]),
        _ => {
            let wm = tape
                .constant(
                    vec![4, n],
                    (0..4 * n).map(|i| y[i % n] * ((i / n) as f64 - 1.5) + 0.1 * (i % n) as f64).collect(),
                )
                .unwrap();
            let b = tape.constant(vec![4], vec![0.0; 4]).unwrap();
            let logits = tape.affine(xv, wm, b).unwrap();
            let l = tape.softmax_nll(logits, &[2]).unwrap();
            tape.backward(l).unwrap();
            return (tape.value(l)[0], tape.grad(xv).unwrap().to_vec());
        }
    }
    .unwrap();
    let m = tape.shape(out)[0];
    let wv = tape.constant(vec![m], w[..m].to_vec()).unwrap();
    let weighted = tape.mul(out, wv).unwrap();
    let loss = tape.sum(weighted).unwrap();
    tape.backward(loss).unwrap();
    (tape.value(loss)[0], tape.grad(xv).unwrap().to_vec())
}

/// Moves `x` at least 0.05 away from the kinks at 0 and at the clamp
/// bounds used by [`op_loss`].
pub fn away_from_kinks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let v = if v.abs() < 0.05 { 0.05f64.copysign(v) } else { v };
            if (v.abs() - 0.5).abs() < 0.05 {
                v * 1.2
            } else {
                v
            }
        })
        .collect()
}
