//! No-grad forward path with incremental decoding caches. Mirrors the
//! tape forward exactly (same op order and epsilons); agreement between
//! the two is covered by tests.

use super::{AggregatorKind, AttnIds, GruIds, LnIds, Model};
use crate::params::ParamId;
use crate::tensor::{softmax_inplace, Tensor};

pub struct Infer<'a> {
    pub m: &'a Model,
}

const LN_EPS: f64 = 1e-8;

impl<'a> Infer<'a> {
    pub fn new(m: &'a Model) -> Self {
        Infer { m }
    }

    fn p(&self, id: ParamId) -> &[f64] {
        self.m.store.view(id)
    }

    fn linear(&self, x: &Tensor, w: ParamId, b: ParamId) -> Tensor {
        let (din, dout) = self.m.store.shape(w);
        assert_eq!(x.cols, din);
        let wv = self.p(w);
        let bv = self.p(b);
        let mut out = Tensor::zeros(x.rows, dout);
        for r in 0..x.rows {
            let xr = x.row(r);
            let o = out.row_mut(r);
            o.copy_from_slice(bv);
            for (i, &xi) in xr.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wr = &wv[i * dout..(i + 1) * dout];
                for (oj, &wj) in o.iter_mut().zip(wr.iter()) {
                    *oj += xi * wj;
                }
            }
        }
        out
    }

    fn ln(&self, x: &Tensor, ids: &LnIds) -> Tensor {
        let g = self.p(ids.g);
        let b = self.p(ids.b);
        let mut out = x.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[i] + b[i];
            }
        }
        out
    }

    fn attention(&self, q_in: &Tensor, kv_in: &Tensor, ids: &AttnIds, causal: bool) -> Tensor {
        let d = self.m.cfg.d_model;
        let heads = self.m.cfg.heads;
        let dk = d / heads;
        let q = self.linear(q_in, ids.wq, ids.bq);
        let k = self.linear(kv_in, ids.wk, ids.bk);
        let v = self.linear(kv_in, ids.wv, ids.bv);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut cat = Tensor::zeros(q.rows, d);
        for h in 0..heads {
            let c0 = h * dk;
            for i in 0..q.rows {
                let klim = if causal { i + 1 } else { k.rows };
                let mut scores: Vec<f64> = (0..klim)
                    .map(|j| {
                        let mut acc = 0.0;
                        for c in 0..dk {
                            acc += q.at(i, c0 + c) * k.at(j, c0 + c);
                        }
                        acc * scale
                    })
                    .collect();
                softmax_inplace(&mut scores);
                for (j, &pj) in scores.iter().enumerate() {
                    for c in 0..dk {
                        *cat.at_mut(i, c0 + c) += pj * v.at(j, c0 + c);
                    }
                }
            }
        }
        self.linear(&cat, ids.wo, ids.bo)
    }

    fn ff(&self, x: &Tensor, ids: &super::FfIds) -> Tensor {
        let mut h = self.linear(x, ids.w1, ids.b1);
        for v in h.data.iter_mut() {
            *v = v.max(0.0);
        }
        self.linear(&h, ids.w2, ids.b2)
    }

    pub fn embed_rows(&self, ids: &[u32]) -> Tensor {
        let d = self.m.cfg.d_model;
        let table = self.p(self.m.ids.embed);
        let pe = super::positional_encoding(ids.len(), d);
        let mut out = Tensor::zeros(ids.len(), d);
        for (r, &tok) in ids.iter().enumerate() {
            let src = &table[tok as usize * d..(tok as usize + 1) * d];
            for c in 0..d {
                *out.at_mut(r, c) = src[c] + pe[r * d + c];
            }
        }
        out
    }

    pub fn encoder_body(&self, mut x: Tensor) -> Tensor {
        for layer in &self.m.ids.enc {
            let a_in = self.ln(&x, &layer.ln1);
            let a = self.attention(&a_in, &a_in, &layer.attn, false);
            x.add_inplace(&a);
            let f_in = self.ln(&x, &layer.ln2);
            let f = self.ff(&f_in, &layer.ff);
            x.add_inplace(&f);
        }
        self.ln(&x, &self.m.ids.enc_ln_f)
    }

    /// Encode `[CLS?] [control] tokens...`.
    pub fn encode(&self, tokens: &[u32], control: u32, cls: Option<u32>) -> Tensor {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        if let Some(c) = cls {
            ids.push(c);
        }
        ids.push(control);
        ids.extend_from_slice(tokens);
        let x = self.embed_rows(&ids);
        self.encoder_body(x)
    }

    /// Precompute the per-layer cross-attention keys/values for `memory`
    /// and return an empty decoding state.
    pub fn start(&self, memory: &Tensor) -> DecState {
        assert!(memory.rows > 0, "decoder requires non-empty memory");
        let layers = self
            .m
            .ids
            .dec
            .iter()
            .map(|l| LayerState {
                self_k: Tensor::zeros(0, self.m.cfg.d_model),
                self_v: Tensor::zeros(0, self.m.cfg.d_model),
                cross_k: self.linear(memory, l.xattn.wk, l.xattn.bk),
                cross_v: self.linear(memory, l.xattn.wv, l.xattn.bv),
            })
            .collect();
        DecState { pos: 0, layers }
    }

    /// Feed one token (the language-control token first) and return the
    /// next-token logits.
    pub fn step(&self, st: &mut DecState, tok: u32) -> Vec<f64> {
        let d = self.m.cfg.d_model;
        let heads = self.m.cfg.heads;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let table = self.p(self.m.ids.embed);
        let mut pe = vec![0.0; d];
        super::positional_row(st.pos, d, &mut pe);
        let mut x = Tensor::zeros(1, d);
        {
            let src = &table[tok as usize * d..(tok as usize + 1) * d];
            for c in 0..d {
                x.data[c] = src[c] + pe[c];
            }
        }
        for (li, layer) in self.m.ids.dec.iter().enumerate() {
            let a_in = self.ln(&x, &layer.ln1);
            let q = self.linear(&a_in, layer.attn.wq, layer.attn.bq);
            let k_new = self.linear(&a_in, layer.attn.wk, layer.attn.bk);
            let v_new = self.linear(&a_in, layer.attn.wv, layer.attn.bv);
            let ls = &mut st.layers[li];
            append_row(&mut ls.self_k, k_new.row(0));
            append_row(&mut ls.self_v, v_new.row(0));
            let a = attend_one(&q, &ls.self_k, &ls.self_v, heads, dk, scale);
            let a = self.linear(&a, layer.attn.wo, layer.attn.bo);
            x.add_inplace(&a);

            let x_in = self.ln(&x, &layer.lnx);
            let qx = self.linear(&x_in, layer.xattn.wq, layer.xattn.bq);
            let ls = &st.layers[li];
            let xa = attend_one(&qx, &ls.cross_k, &ls.cross_v, heads, dk, scale);
            let xa = self.linear(&xa, layer.xattn.wo, layer.xattn.bo);
            x.add_inplace(&xa);

            let f_in = self.ln(&x, &layer.ln2);
            let f = self.ff(&f_in, &layer.ff);
            x.add_inplace(&f);
        }
        let h = self.ln(&x, &self.m.ids.dec_ln_f);
        st.pos += 1;
        // logits via shared embedding table
        let v_size = self.m.cfg.vocab_size;
        let mut logits = vec![0.0; v_size];
        for (t, l) in logits.iter_mut().enumerate() {
            let row = &table[t * d..(t + 1) * d];
            let mut acc = 0.0;
            for c in 0..d {
                acc += h.data[c] * row[c];
            }
            *l = acc;
        }
        logits
    }

    /// Full teacher-forced pass via the incremental path.
    pub fn teacher_forced_logits(&self, memory: &Tensor, target: &[u32], control: u32) -> Vec<Vec<f64>> {
        let mut st = self.start(memory);
        let mut out = Vec::with_capacity(target.len() + 1);
        out.push(self.step(&mut st, control));
        for &t in target {
            out.push(self.step(&mut st, t));
        }
        out
    }

    pub fn adapt_image(&self, features: &[f64]) -> Tensor {
        assert_eq!(features.len(), self.m.cfg.feature_dim);
        let fx = Tensor::row_vec(features.to_vec());
        let proj = self.linear(&fx, self.m.ids.adapter_in_w, self.m.ids.adapter_in_b);
        let mut h = proj;
        for v in h.data.iter_mut() {
            *v = v.tanh();
        }
        let step_in = Tensor::row_vec(self.p(self.m.ids.adapter_step_in).to_vec());
        let mut out = Tensor::zeros(self.m.cfg.adapter_len, self.m.cfg.d_model);
        for k in 0..self.m.cfg.adapter_len {
            h = self.gru_step(&self.m.ids.adapter_gru, &step_in, &h);
            out.row_mut(k).copy_from_slice(h.row(0));
        }
        out
    }

    fn gru_step(&self, ids: &GruIds, x: &Tensor, h: &Tensor) -> Tensor {
        let mut z = self.linear(x, ids.wz, ids.bz);
        let hz = self.matmul_param(h, ids.uz);
        z.add_inplace(&hz);
        for v in z.data.iter_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        let mut r = self.linear(x, ids.wr, ids.br);
        let hr = self.matmul_param(h, ids.ur);
        r.add_inplace(&hr);
        for v in r.data.iter_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        let mut rh = h.clone();
        for (v, &rv) in rh.data.iter_mut().zip(r.data.iter()) {
            *v *= rv;
        }
        let mut cand = self.linear(x, ids.wh, ids.bh);
        let hh = self.matmul_param(&rh, ids.uh);
        cand.add_inplace(&hh);
        for v in cand.data.iter_mut() {
            *v = v.tanh();
        }
        let mut out = h.clone();
        for i in 0..out.data.len() {
            out.data[i] = (1.0 - z.data[i]) * h.data[i] + z.data[i] * cand.data[i];
        }
        out
    }

    fn matmul_param(&self, x: &Tensor, w: ParamId) -> Tensor {
        let (din, dout) = self.m.store.shape(w);
        assert_eq!(x.cols, din);
        let wv = self.p(w);
        let mut out = Tensor::zeros(x.rows, dout);
        for r in 0..x.rows {
            let xr = x.row(r);
            let o = out.row_mut(r);
            for (i, &xi) in xr.iter().enumerate() {
                let wr = &wv[i * dout..(i + 1) * dout];
                for (oj, &wj) in o.iter_mut().zip(wr.iter()) {
                    *oj += xi * wj;
                }
            }
        }
        out
    }

    pub fn aggregate_receiver(&self, hidden: &Tensor, variant: AggregatorKind) -> Vec<f64> {
        match variant {
            AggregatorKind::ClsToken => {
                let cls = Tensor::row_vec(hidden.row(0).to_vec());
                self.linear(&cls, self.m.ids.agg_cls_proj_w, self.m.ids.agg_cls_proj_b)
                    .data
            }
            AggregatorKind::Recurrent => {
                let mut h = Tensor::zeros(1, self.m.cfg.d_model);
                for t in 0..hidden.rows {
                    let x = Tensor::row_vec(hidden.row(t).to_vec());
                    h = self.gru_step(&self.m.ids.agg_gru, &x, &h);
                }
                self.linear(&h, self.m.ids.agg_rnn_proj_w, self.m.ids.agg_rnn_proj_b)
                    .data
            }
        }
    }
}

#[derive(Clone)]
pub struct DecState {
    pub pos: usize,
    layers: Vec<LayerState>,
}

#[derive(Clone)]
struct LayerState {
    self_k: Tensor,
    self_v: Tensor,
    cross_k: Tensor,
    cross_v: Tensor,
}

fn append_row(t: &mut Tensor, row: &[f64]) {
    assert_eq!(t.cols, row.len());
    t.data.extend_from_slice(row);
    t.rows += 1;
}

fn attend_one(q: &Tensor, keys: &Tensor, values: &Tensor, heads: usize, dk: usize, scale: f64) -> Tensor {
    let d = heads * dk;
    let mut out = Tensor::zeros(1, d);
    for h in 0..heads {
        let c0 = h * dk;
        let mut scores: Vec<f64> = (0..keys.rows)
            .map(|j| {
                let mut acc = 0.0;
                for c in 0..dk {
                    acc += q.at(0, c0 + c) * keys.at(j, c0 + c);
                }
                acc * scale
            })
            .collect();
        softmax_inplace(&mut scores);
        for (j, &pj) in scores.iter().enumerate() {
            for c in 0..dk {
                out.data[c0 + c] += pj * values.at(j, c0 + c);
            }
        }
    }
    out
}
