//! Bidirectional LSTM with backpropagation through time.
//!
//! Gate layout along the `4h` axis is `[input, forget, cell, output]`:
//!
//! ```text
//! z_t = x_t W_ih + h_{t-1} W_hh + b
//! i, f, o = sigmoid(z_i, z_f, z_o);  g = tanh(z_g)
//! c_t = f * c_{t-1} + i * g
//! h_t = o * tanh(c_t)
//! ```
//!
//! The reverse direction runs the same cell from `T-1` down to `0`, and the
//! two hidden sequences are concatenated per step as `[forward | reverse]`.

use super::init::xavier_init;
use super::layers::sigmoid;
use super::params::{Grads, ParamId, ParameterStore};
use super::tensor::{mat_vec_acc, outer_acc, vec_mat_acc, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub input: usize,
    pub hidden: usize,
}

impl BiLstmParams {
    /// Registers `{prefix}/{fwd,bwd}/{w_ih,w_hh,b}` with Xavier weights and zero biases.
    pub fn register<F: Scalar>(
        store: &mut ParameterStore<F>,
        prefix: &str,
        input: usize,
        hidden: usize,
        stream: Stream,
    ) -> Result<Self> {
        let mut dir = |name: &str| -> Result<LstmParams> {
            let s = stream.tag(name);
            Ok(LstmParams {
                w_ih: store.insert(
                    &format!("{prefix}/{name}/w_ih"),
                    xavier_init(&[input, 4 * hidden], s.tag("w_ih")),
                    true,
                )?,
                w_hh: store.insert(
                    &format!("{prefix}/{name}/w_hh"),
                    xavier_init(&[hidden, 4 * hidden], s.tag("w_hh")),
                    true,
                )?,
                bias: store.insert(&format!("{prefix}/{name}/b"), Tensor::zeros(&[4 * hidden]), true)?,
            })
        };
        let fwd = dir("fwd")?;
        let bwd = dir("bwd")?;
        Ok(BiLstmParams { fwd, bwd, input, hidden })
    }

    pub fn output_size(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Clone, Debug)]
struct DirCache<F> {
    /// Post-activation gates per step, `[T, 4h]`.
    gates: Vec<F>,
    c: Vec<F>,
    tanh_c: Vec<F>,
    h: Vec<F>,
    reverse: bool,
}

#[derive(Clone, Debug)]
pub struct BiLstmCache<F> {
    x: Tensor<F>,
    fwd: DirCache<F>,
    bwd: DirCache<F>,
}

fn step_order(len: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    }
}

fn dir_forward<F: Scalar>(
    x: &Tensor<F>,
    w_ih: &Tensor<F>,
    w_hh: &Tensor<F>,
    b: &Tensor<F>,
    h_size: usize,
    reverse: bool,
) -> DirCache<F> {
    let t_len = x.rows();
    let g4 = 4 * h_size;
    let mut cache = DirCache {
        gates: vec![F::zero(); t_len * g4],
        c: vec![F::zero(); t_len * h_size],
        tanh_c: vec![F::zero(); t_len * h_size],
        h: vec![F::zero(); t_len * h_size],
        reverse,
    };
    let mut h_prev = vec![F::zero(); h_size];
    let mut c_prev = vec![F::zero(); h_size];
    let mut z = vec![F::zero(); g4];
    for t in step_order(t_len, reverse) {
        z.copy_from_slice(b.data());
        vec_mat_acc(x.row(t), w_ih.data(), &mut z);
        vec_mat_acc(&h_prev, w_hh.data(), &mut z);
        let gates = &mut cache.gates[t * g4..(t + 1) * g4];
        for k in 0..h_size {
            let i = sigmoid(z[k]);
            let f = sigmoid(z[h_size + k]);
            let g = z[2 * h_size + k].tanh();
            let o = sigmoid(z[3 * h_size + k]);
            gates[k] = i;
            gates[h_size + k] = f;
            gates[2 * h_size + k] = g;
            gates[3 * h_size + k] = o;
            let c = f * c_prev[k] + i * g;
            let tc = c.tanh();
            cache.c[t * h_size + k] = c;
            cache.tanh_c[t * h_size + k] = tc;
            cache.h[t * h_size + k] = o * tc;
        }
        h_prev.copy_from_slice(&cache.h[t * h_size..(t + 1) * h_size]);
        c_prev.copy_from_slice(&cache.c[t * h_size..(t + 1) * h_size]);
    }
    cache
}

/// `dh` holds the loss gradient w.r.t. this direction's outputs, `[T, h]`.
#[allow(clippy::too_many_arguments)]
fn dir_backward<F: Scalar>(
    cache: &DirCache<F>,
    x: &Tensor<F>,
    w_ih: &Tensor<F>,
    w_hh: &Tensor<F>,
    dh: &[F],
    h_size: usize,
    dw_ih: &mut Tensor<F>,
    dw_hh: &mut Tensor<F>,
    db: &mut Tensor<F>,
    dx: &mut Tensor<F>,
) {
    let t_len = x.rows();
    let g4 = 4 * h_size;
    let mut dh_next = vec![F::zero(); h_size];
    let mut dc_next = vec![F::zero(); h_size];
    let mut dz = vec![F::zero(); g4];
    let zeros = vec![F::zero(); h_size];
    // Reverse of the forward visiting order.
    for t in step_order(t_len, !cache.reverse) {
        let prev = if cache.reverse {
            (t + 1 < t_len).then_some(t + 1)
        } else {
            t.checked_sub(1)
        };
        let (h_prev, c_prev) = match prev {
            Some(p) => (&cache.h[p * h_size..(p + 1) * h_size], &cache.c[p * h_size..(p + 1) * h_size]),
            None => (&zeros[..], &zeros[..]),
        };
        let gates = &cache.gates[t * g4..(t + 1) * g4];
        for k in 0..h_size {
            let (i, f, g, o) = (gates[k], gates[h_size + k], gates[2 * h_size + k], gates[3 * h_size + k]);
            let tc = cache.tanh_c[t * h_size + k];
            let dht = dh[t * h_size + k] + dh_next[k];
            let d_o = dht * tc;
            let dc = dht * o * (F::one() - tc * tc) + dc_next[k];
            let di = dc * g;
            let dg = dc * i;
            let df = dc * c_prev[k];
            dc_next[k] = dc * f;
            dz[k] = di * i * (F::one() - i);
            dz[h_size + k] = df * f * (F::one() - f);
            dz[2 * h_size + k] = dg * (F::one() - g * g);
            dz[3 * h_size + k] = d_o * o * (F::one() - o);
        }
        outer_acc(x.row(t), &dz, dw_ih.data_mut());
        outer_acc(h_prev, &dz, dw_hh.data_mut());
        for (gb, &v) in db.data_mut().iter_mut().zip(&dz) {
            *gb += v;
        }
        mat_vec_acc(w_ih.data(), &dz, dx.row_mut(t));
        dh_next.iter_mut().for_each(|v| *v = F::zero());
        mat_vec_acc(w_hh.data(), &dz, &mut dh_next);
    }
}

/// Runs both directions over `x: [T, input]` and returns `[T, 2h]`.
pub fn bilstm<F: Scalar>(
    x: &Tensor<F>,
    store: &ParameterStore<F>,
    p: &BiLstmParams,
) -> Result<(Tensor<F>, BiLstmCache<F>)> {
    if x.rows() == 0 || x.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!("bilstm needs a non-empty [T, d] input, got {:?}", x.shape())));
    }
    if x.cols() != p.input {
        return Err(Error::shape("bilstm input", x.shape(), &[x.rows(), p.input]));
    }
    let h = p.hidden;
    let run = |lp: &LstmParams, reverse| {
        dir_forward(x, store.value(lp.w_ih), store.value(lp.w_hh), store.value(lp.bias), h, reverse)
    };
    let fwd = run(&p.fwd, false);
    let bwd = run(&p.bwd, true);
    let t_len = x.rows();
    let mut out = Tensor::zeros(&[t_len, 2 * h]);
    for t in 0..t_len {
        let row = out.row_mut(t);
        row[..h].copy_from_slice(&fwd.h[t * h..(t + 1) * h]);
        row[h..].copy_from_slice(&bwd.h[t * h..(t + 1) * h]);
    }
    Ok((out, BiLstmCache { x: x.clone(), fwd, bwd }))
}

pub fn bilstm_backward<F: Scalar>(
    cache: &BiLstmCache<F>,
    store: &ParameterStore<F>,
    p: &BiLstmParams,
    dy: &Tensor<F>,
    grads: &mut Grads<F>,
) -> Tensor<F> {
    let h = p.hidden;
    let t_len = cache.x.rows();
    let mut dh_f = vec![F::zero(); t_len * h];
    let mut dh_b = vec![F::zero(); t_len * h];
    for t in 0..t_len {
        let row = dy.row(t);
        dh_f[t * h..(t + 1) * h].copy_from_slice(&row[..h]);
        dh_b[t * h..(t + 1) * h].copy_from_slice(&row[h..]);
    }
    let mut dx = Tensor::zeros(&[t_len, p.input]);
    for (lp, dc, dh) in [(&p.fwd, &cache.fwd, &dh_f), (&p.bwd, &cache.bwd, &dh_b)] {
        let mut dw_ih = std::mem::replace(grads.get_mut(lp.w_ih), Tensor::zeros(&[0]));
        let mut dw_hh = std::mem::replace(grads.get_mut(lp.w_hh), Tensor::zeros(&[0]));
        let mut db = std::mem::replace(grads.get_mut(lp.bias), Tensor::zeros(&[0]));
        dir_backward(
            dc,
            &cache.x,
            store.value(lp.w_ih),
            store.value(lp.w_hh),
            dh,
            h,
            &mut dw_ih,
            &mut dw_hh,
            &mut db,
            &mut dx,
        );
        *grads.get_mut(lp.w_ih) = dw_ih;
        *grads.get_mut(lp.w_hh) = dw_hh;
        *grads.get_mut(lp.bias) = db;
    }
    dx
}
