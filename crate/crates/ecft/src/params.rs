//! Flat parameter storage. All model parameters live in one contiguous
//! `Vec<f64>` with named views, so gradients, Adam state, and checkpoints
//! are plain flat vectors with a shared index.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    pub data: Vec<f64>,
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            data: Vec::new(),
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: impl FnMut() -> f64) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let offset = self.data.len();
        let mut init = init;
        self.data.extend((0..rows * cols).map(|_| init()));
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            offset,
            rows,
            cols,
        });
        self.by_name.insert(name.to_string(), id.0);
        id
    }

    pub fn add_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> ParamId {
        // Box-Muller from the seeded stream keeps init independent of rand_distr internals.
        let mut spare: Option<f64> = None;
        self.add(name, rows, cols, move || {
            if let Some(v) = spare.take() {
                return v * std;
            }
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (-2.0 * u1.ln()).sqrt();
            spare = Some(r * u2.sin());
            r * u2.cos() * std
        })
    }

    pub fn add_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, rows, cols, || v)
    }

    pub fn id(&self, name: &str) -> ParamId {
        ParamId(*self.by_name.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")))
    }

    pub fn try_id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn view(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.rows * e.cols]
    }

    pub fn view_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = self.entries[id.0].clone();
        &mut self.data[e.offset..e.offset + e.rows * e.cols]
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        let e = &self.entries[id.0];
        Tensor::from_vec(self.view(id).to_vec(), e.rows, e.cols)
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        let e = &self.entries[id.0];
        (e.rows, e.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Fletcher-style checksum used by read-only contracts in tests.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for &v in &self.data {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}
