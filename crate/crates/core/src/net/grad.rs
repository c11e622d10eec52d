//! Reverse-mode gradients for the passthrough forward pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};

use super::{silu_grad, Params, Tape, VelocityNet};

/// Gradients share the parameter layout.
pub(crate) type Gradients = Params;

fn accumulate_matmul(acc: &mut Array2<f32>, a: ArrayView2<f32>, b: ArrayView2<f32>) {
    general_mat_mul(1.0, &a, &b, 1.0, acc);
}

fn accumulate_col_sum(acc: &mut Array2<f32>, m: &Array2<f32>) {
    let sum = m.sum_axis(Axis(0));
    acc.row_mut(0).zip_mut_with(&sum, |a, b| *a += b);
}

fn layer_norm_backward(dy: &Array2<f32>, y: &Array2<f32>, rstd: &[f32]) -> Array2<f32> {
    let n = dy.ncols() as f32;
    let mut dx = dy.clone();
    for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
        let yr = y.row(i);
        let mean_dy = row.sum() / n;
        let mean_dyy = row.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f32>() / n;
        let r = rstd[i];
        row.zip_mut_with(&yr, |d, &yv| *d = r * (*d - mean_dy - yv * mean_dyy));
    }
    dx
}

impl VelocityNet {
    /// Accumulate `∂L/∂θ` into `grads` given `∂L/∂output` for a taped pass.
    pub(crate) fn backward(&self, tape: &Tape, d_out: ArrayView2<f32>, grads: &mut Gradients) {
        let c = &self.config;
        let p = &self.params;
        let head_dim = c.head_dim;
        let scale = 1.0 / (head_dim as f32).sqrt();

        let d_gain = (&d_out * &tape.head).sum_axis(Axis(0));
        grads
            .b_gain
            .row_mut(0)
            .zip_mut_with(&d_gain, |a, b| *a += b);
        let d_gain = d_gain.insert_axis(Axis(0));
        accumulate_matmul(&mut grads.w_gain, tape.embed.t(), d_gain.view());
        let d_embed = d_gain.dot(&p.w_gain.t());
        let d_head = &d_out * &tape.gain;
        accumulate_matmul(&mut grads.w_out, tape.a_last.t(), d_head.view());
        accumulate_col_sum(&mut grads.b_out, &d_head);
        let d_skip = (&d_out * &tape.x).sum_axis(Axis(0));
        grads
            .b_skip
            .row_mut(0)
            .zip_mut_with(&d_skip, |a, b| *a += b);
        for (f, &phi) in tape.phi.iter().enumerate() {
            grads.w_skip.row_mut(f).scaled_add(phi, &d_skip);
        }
        let da = d_head.dot(&p.w_out.t());
        let mut dh = layer_norm_backward(&da, &tape.a_last, &tape.rstd_last);

        for b in (0..c.blocks).rev() {
            let bp = &p.blocks[b];
            let bt = &tape.blocks[b];
            let gb = &mut grads.blocks[b];

            if let Some(map) = &tape.adapter_map {
                for (branch, &beta) in tape.adapter_strengths.iter().enumerate() {
                    if beta == 0.0 {
                        continue;
                    }
                    let mut row = gb.adapter.row_mut(branch);
                    for (i, dh_row) in dh.axis_iter(Axis(0)).enumerate() {
                        let w = beta * map[i];
                        if w != 0.0 {
                            row.scaled_add(w, &dh_row);
                        }
                    }
                }
            }

            // feed-forward residual
            accumulate_matmul(&mut gb.w2, bt.g.t(), dh.view());
            accumulate_col_sum(&mut gb.b2, &dh);
            let mut du = dh.dot(&bp.w2.t());
            du.zip_mut_with(&bt.u, |d, &u| *d *= silu_grad(u));
            accumulate_matmul(&mut gb.w1, bt.a2.t(), du.view());
            accumulate_col_sum(&mut gb.b1, &du);
            let da2 = du.dot(&bp.w1.t());
            dh += &layer_norm_backward(&da2, &bt.a2, &bt.rstd_a2);

            // attention residual
            accumulate_matmul(&mut gb.wo, bt.o.t(), dh.view());
            accumulate_col_sum(&mut gb.bo, &dh);
            let d_o = dh.dot(&bp.wo.t());
            let mut dq = Array2::<f32>::zeros(bt.q.dim());
            let mut dk = Array2::<f32>::zeros(bt.k.dim());
            let mut dv = Array2::<f32>::zeros(bt.v.dim());
            for (h, probs) in bt.probs.iter().enumerate() {
                let cols = s![.., h * head_dim..(h + 1) * head_dim];
                let d_oh = d_o.slice(cols);
                let mut dp = d_oh.dot(&bt.v.slice(cols).t());
                dv.slice_mut(cols).assign(&probs.t().dot(&d_oh));
                for (mut dp_row, p_row) in dp.axis_iter_mut(Axis(0)).zip(probs.axis_iter(Axis(0))) {
                    let dot: f32 = dp_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum();
                    dp_row.zip_mut_with(&p_row, |d, &pv| *d = pv * (*d - dot) * scale);
                }
                dq.slice_mut(cols).assign(&dp.dot(&bt.k.slice(cols)));
                dk.slice_mut(cols).assign(&dp.t().dot(&bt.q.slice(cols)));
            }
            accumulate_matmul(&mut gb.wq, bt.a.t(), dq.view());
            accumulate_matmul(&mut gb.wk, bt.a.t(), dk.view());
            accumulate_matmul(&mut gb.wv, bt.a.t(), dv.view());
            let mut da = dq.dot(&bp.wq.t());
            accumulate_matmul(&mut da, dk.view(), bp.wk.t());
            accumulate_matmul(&mut da, dv.view(), bp.wv.t());
            dh += &layer_norm_backward(&da, &bt.a, &bt.rstd_a);
        }

        accumulate_matmul(&mut grads.w_in, tape.x.t(), dh.view());
        accumulate_col_sum(&mut grads.b_in, &dh);
        grads.pos += &dh;
        grads.cond_map.row_mut(tape.cond_row).zip_mut_with(
            &ArrayView1::from(dh.as_slice().expect("row-major")),
            |a, b| *a += b,
        );
        let de = dh.sum_axis(Axis(0)) + d_embed.row(0);
        for (f, &phi) in tape.phi.iter().enumerate() {
            grads.w_time.row_mut(f).scaled_add(phi, &de);
        }
        grads.b_time.row_mut(0).zip_mut_with(&de, |a, b| *a += b);
        grads
            .cond
            .row_mut(tape.cond_row)
            .zip_mut_with(&de, |a, b| *a += b);
    }
}
