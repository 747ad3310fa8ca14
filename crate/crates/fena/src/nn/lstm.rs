use crate::error::{Error, Result};
use crate::nn::layers::glorot_uniform;
use crate::nn::params::{Bound, ParamId, ParamSet};
use crate::nn::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Standard LSTM cell with a forget gate and no peepholes. The input and
/// recurrent kernels are stored gate-stacked along the output axis in the
/// order [input, forget, candidate, output], i.e. shape in×4H and H×4H.
/// Biases start at zero except the forget gate block, which starts at one so
/// early training favors carrying state.
#[derive(Clone)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub in_width: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        in_width: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> LstmCell {
        let wx = params.add(
            format!("{}.wx", name),
            glorot_uniform(rng, &[in_width, 4 * hidden], in_width, hidden),
        );
        let wh = params.add(
            format!("{}.wh", name),
            glorot_uniform(rng, &[hidden, 4 * hidden], hidden, hidden),
        );
        let mut bias = Tensor::zeros(&[4 * hidden]);
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        let b = params.add(format!("{}.b", name), bias);
        LstmCell {
            wx,
            wh,
            b,
            in_width,
            hidden,
        }
    }

    /// One recurrence step: consumes x (B×in), state (B×H, B×H), returns the
    /// next (hidden, cell) pair.
    pub fn step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let (_, xw) = tape.value(x).dim2()?;
        if xw != self.in_width {
            return Err(Error::ShapeMismatch {
                op: "LstmCell::step",
                detail: format!("input width {} but cell expects {}", xw, self.in_width),
            });
        }
        let hh = self.hidden;
        let zx = tape.matmul(x, bound.var(self.wx))?;
        let zh = tape.matmul(h, bound.var(self.wh))?;
        let z = tape.add(zx, zh)?;
        let z = tape.add_bias_row(z, bound.var(self.b))?;

        let i_lin = tape.slice_cols(z, 0, hh)?;
        let f_lin = tape.slice_cols(z, hh, hh)?;
        let g_lin = tape.slice_cols(z, 2 * hh, hh)?;
        let o_lin = tape.slice_cols(z, 3 * hh, hh)?;

        let i = tape.sigmoid(i_lin);
        let f = tape.sigmoid(f_lin);
        let g = tape.tanh(g_lin);
        let o = tape.sigmoid(o_lin);

        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let c_act = tape.tanh(c_next);
        let h_next = tape.mul(o, c_act)?;
        Ok((h_next, c_next))
    }
}

/// Initial states for the two directions of a bidirectional pass.
pub struct BrnnInit {
    pub h_fwd: Var,
    pub c_fwd: Var,
    pub h_bwd: Var,
    pub c_bwd: Var,
}

/// Bidirectional recurrent layer: one forward and one backward LSTM over the
/// same sequence. The output at step t is [fwd_hidden_t ; bwd_hidden_t],
/// where the backward cell has consumed the sequence from the end down to t.
#[derive(Clone)]
pub struct Brnn {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl Brnn {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        in_width: usize,
        hidden_per_dir: usize,
        rng: &mut ChaCha8Rng,
    ) -> Brnn {
        Brnn {
            fwd: LstmCell::init(params, &format!("{}.fwd", name), in_width, hidden_per_dir, rng),
            bwd: LstmCell::init(params, &format!("{}.bwd", name), in_width, hidden_per_dir, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        xs: &[Var],
        init: &BrnnInit,
    ) -> Result<Vec<Var>> {
        if xs.is_empty() {
            return Err(Error::Config("bidirectional pass over an empty sequence".into()));
        }
        let n = xs.len();
        let mut fwd_h = Vec::with_capacity(n);
        let (mut h, mut c) = (init.h_fwd, init.c_fwd);
        for &x in xs {
            let (hn, cn) = self.fwd.step(tape, bound, x, h, c)?;
            fwd_h.push(hn);
            h = hn;
            c = cn;
        }
        let mut bwd_h = vec![None; n];
        let (mut h, mut c) = (init.h_bwd, init.c_bwd);
        for t in (0..n).rev() {
            let (hn, cn) = self.bwd.step(tape, bound, xs[t], h, c)?;
            bwd_h[t] = Some(hn);
            h = hn;
            c = cn;
        }
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            out.push(tape.concat_cols(fwd_h[t], bwd_h[t].expect("filled above"))?);
        }
        Ok(out)
    }
}
