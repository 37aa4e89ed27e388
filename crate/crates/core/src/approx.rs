//! Small fully connected networks with hand-written reverse mode.
//!
//! Parameters live in one flat `Vec<f64>`. Layer `l` with fan-in `n` and
//! fan-out `m` stores an `m × n` row-major weight block followed by `m`
//! biases. Hidden layers use a rectifier (subgradient 0 at 0); the output
//! layer is either identity or `exp`.
//!
//! # Checkpoint format
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic    b"MUCK"
//! version  u32 = 1
//! step     u64
//! meta     u32 length + UTF-8 bytes
//! count    u32
//! entry*   u32 name length, name bytes, u8 kind
//!   kind 0 (model):  u8 output (0 identity, 1 exp), u32 layer count,
//!                    u32 sizes..., u64 parameter count, f64 params...,
//!                    u8 has-optimizer, then optionally an optimizer block
//!   kind 1 (vector): u64 length, f64 values...
//!   kind 2 (params): u64 length, f64 values..., optimizer block
//! optimizer block:   u8 rule (0 adam, 1 sgd), f64 lr, f64 beta1, f64 beta2,
//!                    f64 eps, u64 t, f64 m[params], f64 v[params]
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("input has length {got}, network expects {expected}")]
    Shape { expected: usize, got: usize },
    #[error("network needs at least an input and an output layer")]
    TooFewLayers,
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Identity,
    Exp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    output: OutputActivation,
}

/// Activations retained by [`Mlp::forward_cached`] for a backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    /// Post-activation values of every layer, input first.
    acts: Vec<Vec<f64>>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache has layers")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: &[usize], output: OutputActivation) -> Result<Self, ApproxError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(ApproxError::TooFewLayers);
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
            output,
        })
    }

    /// Uniform fan-in initialisation: every weight and bias of a layer with
    /// fan-in `n` is drawn from U(−1/√n, 1/√n).
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self, ApproxError> {
        let mut m = Mlp::zeros(sizes, output)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut m.params[off..off + w[1] * w[0] + w[1]] {
                *p = rng.random_range(-bound..bound);
            }
            off += w[1] * w[0] + w[1];
        }
        Ok(m)
    }

    /// Hidden widths between `input` and `output` units.
    pub fn with_hidden<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        out: usize,
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self, ApproxError> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(out);
        Mlp::new(&sizes, output, rng)
    }

    pub fn from_parts(
        sizes: Vec<usize>,
        params: Vec<f64>,
        output: OutputActivation,
    ) -> Result<Self, ApproxError> {
        let mut m = Mlp::zeros(&sizes, output)?;
        if params.len() != m.params.len() {
            return Err(ApproxError::Shape {
                expected: m.params.len(),
                got: params.len(),
            });
        }
        m.params = params;
        Ok(m)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check(&self, x: &[f64]) -> Result<(), ApproxError> {
        if x.len() != self.sizes[0] {
            return Err(ApproxError::Shape {
                expected: self.sizes[0],
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ApproxError> {
        self.check(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let mut off = 0;
        let last = self.sizes.len() - 2;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n, m) = (w[0], w[1]);
            let (wts, rest) = self.params[off..].split_at(m * n);
            let bias = &rest[..m];
            next.clear();
            for j in 0..m {
                let row = &wts[j * n..(j + 1) * n];
                let z = bias[j] + row.iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>();
                next.push(self.activate(l == last, z));
            }
            std::mem::swap(&mut cur, &mut next);
            off += m * n + m;
        }
        Ok(cur)
    }

    fn activate(&self, is_output: bool, z: f64) -> f64 {
        if is_output {
            match self.output {
                OutputActivation::Identity => z,
                OutputActivation::Exp => z.exp(),
            }
        } else {
            z.max(0.0)
        }
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<Cache, ApproxError> {
        self.check(x)?;
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let last = self.sizes.len() - 2;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n, m) = (w[0], w[1]);
            let prev = acts.last().unwrap();
            let mut out = Vec::with_capacity(m);
            for j in 0..m {
                let row = &self.params[off + j * n..off + (j + 1) * n];
                let z = self.params[off + m * n + j]
                    + row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>();
                out.push(self.activate(l == last, z));
            }
            acts.push(out);
            off += m * n + m;
        }
        Ok(Cache { acts })
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂output`.
    pub fn backward(&self, cache: &Cache, d_out: &[f64], grads: &mut [f64]) {
        debug_assert_eq!(grads.len(), self.params.len());
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[1] * w[0] + w[1];
        }
        let mut delta: Vec<f64> = match self.output {
            OutputActivation::Identity => d_out.to_vec(),
            OutputActivation::Exp => d_out.iter().zip(cache.output()).map(|(d, y)| d * y).collect(),
        };
        for l in (0..layers).rev() {
            let (n, m) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &cache.acts[l];
            for j in 0..m {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grads[off + j * n..off + (j + 1) * n];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi += d * xi;
                }
                grads[off + m * n + j] += d;
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; n];
            for j in 0..m {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                let row = &self.params[off + j * n..off + (j + 1) * n];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    /// Loss and exact gradient for one input. `loss` maps the network
    /// output to `(L, ∂L/∂output)`.
    pub fn grad<F>(&self, x: &[f64], loss: F) -> Result<(f64, Vec<f64>), ApproxError>
    where
        F: FnOnce(&[f64]) -> (f64, Vec<f64>),
    {
        let cache = self.forward_cached(x)?;
        let (l, d_out) = loss(cache.output());
        let mut g = vec![0.0; self.params.len()];
        self.backward(&cache, &d_out, &mut g);
        Ok((l, g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub rule: UpdateRule,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(rule: UpdateRule, learning_rate: f64, num_params: usize) -> Self {
        Optimizer {
            rule,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn for_model(rule: UpdateRule, learning_rate: f64, model: &Mlp) -> Self {
        Optimizer::new(rule, learning_rate, model.num_params())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one descent step to `params`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
        self.t += 1;
        match self.rule {
            UpdateRule::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.learning_rate * g;
                }
            }
            UpdateRule::Adam => {
                let t = self.t as f64;
                let c1 = 1.0 - self.beta1.powf(t);
                let c2 = 1.0 - self.beta2.powf(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
                }
            }
        }
    }

    pub fn step_model(&mut self, model: &mut Mlp, grads: &[f64]) {
        self.step(model.params_mut(), grads);
    }
}

/// A network and its optimizer, trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub model: Mlp,
    pub opt: Optimizer,
}

impl Trainable {
    pub fn new(model: Mlp, rule: UpdateRule, learning_rate: f64) -> Self {
        let opt = Optimizer::for_model(rule, learning_rate, &model);
        Trainable { model, opt }
    }

    pub fn apply(&mut self, grads: &[f64]) {
        self.opt.step(self.model.params_mut(), grads);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Model(Mlp, Option<Optimizer>),
    Vector(Vec<f64>),
    Params(ParamVector),
}

/// Free parameters outside any network, with their own optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub opt: Optimizer,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, rule: UpdateRule, learning_rate: f64) -> Self {
        let opt = Optimizer::new(rule, learning_rate, values.len());
        ParamVector { values, opt }
    }

    pub fn apply(&mut self, grads: &[f64]) {
        self.opt.step(&mut self.values, grads);
    }
}

/// Named models and vectors saved together at one training step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub step: u64,
    pub meta: String,
    pub entries: Vec<(String, Entry)>,
}

const MAGIC: &[u8; 4] = b"MUCK";
const VERSION: u32 = 1;

fn put_u8(w: &mut impl Write, v: u8) -> io::Result<()> {
    w.write_all(&[v])
}
fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn put_f64s(w: &mut impl Write, v: &[f64]) -> io::Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}
fn put_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}
fn get_u8(r: &mut impl Read) -> io::Result<u8> {
    Ok(get::<1>(r)?[0])
}
fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}
fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}
fn get_f64(r: &mut impl Read) -> io::Result<f64> {
    Ok(f64::from_le_bytes(get(r)?))
}
fn get_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    (0..n).map(|_| get_f64(r)).collect()
}
fn get_len(r: &mut impl Read, limit: u64) -> Result<usize, ApproxError> {
    let n = get_u64(r)?;
    if n > limit {
        return Err(ApproxError::Format(format!("length {n} exceeds {limit}")));
    }
    Ok(n as usize)
}
fn get_str(r: &mut impl Read) -> Result<String, ApproxError> {
    let n = get_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| ApproxError::Format(e.to_string()))
}

const MAX_LEN: u64 = 1 << 32;

fn put_optimizer(w: &mut impl Write, o: &Optimizer) -> io::Result<()> {
    put_u8(w, o.rule as u8)?;
    put_f64s(w, &[o.learning_rate, o.beta1, o.beta2, o.eps])?;
    put_u64(w, o.t)?;
    put_f64s(w, &o.m)?;
    put_f64s(w, &o.v)
}

fn get_optimizer(r: &mut impl Read, n: usize) -> Result<Optimizer, ApproxError> {
    let rule = match get_u8(r)? {
        0 => UpdateRule::Adam,
        1 => UpdateRule::Sgd,
        k => return Err(ApproxError::Format(format!("bad rule {k}"))),
    };
    let h = get_f64s(r, 4)?;
    let t = get_u64(r)?;
    let m = get_f64s(r, n)?;
    let v = get_f64s(r, n)?;
    Ok(Optimizer {
        rule,
        learning_rate: h[0],
        beta1: h[1],
        beta2: h[2],
        eps: h[3],
        t,
        m,
        v,
    })
}

impl Checkpoint {
    pub fn new(step: u64) -> Self {
        Checkpoint {
            step,
            ..Default::default()
        }
    }

    pub fn push_model(&mut self, name: impl Into<String>, t: &Trainable) {
        self.entries
            .push((name.into(), Entry::Model(t.model.clone(), Some(t.opt.clone()))));
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: Vec<f64>) {
        self.entries.push((name.into(), Entry::Vector(v)));
    }

    pub fn push_params(&mut self, name: impl Into<String>, p: &ParamVector) {
        self.entries.push((name.into(), Entry::Params(p.clone())));
    }

    pub fn params(&self, name: &str) -> Result<ParamVector, ApproxError> {
        match self.get(name) {
            Some(Entry::Params(p)) => Ok(p.clone()),
            _ => Err(ApproxError::Format(format!("no parameter entry {name:?}"))),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn trainable(&self, name: &str) -> Result<Trainable, ApproxError> {
        match self.get(name) {
            Some(Entry::Model(m, Some(o))) => Ok(Trainable {
                model: m.clone(),
                opt: o.clone(),
            }),
            _ => Err(ApproxError::Format(format!("no trainable entry {name:?}"))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<&[f64], ApproxError> {
        match self.get(name) {
            Some(Entry::Vector(v)) => Ok(v),
            _ => Err(ApproxError::Format(format!("no vector entry {name:?}"))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ApproxError> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_u64(w, self.step)?;
        put_str(w, &self.meta)?;
        put_u32(w, self.entries.len() as u32)?;
        for (name, e) in &self.entries {
            put_str(w, name)?;
            match e {
                Entry::Model(m, opt) => {
                    put_u8(w, 0)?;
                    put_u8(w, m.output as u8)?;
                    put_u32(w, m.sizes.len() as u32)?;
                    for &s in &m.sizes {
                        put_u32(w, s as u32)?;
                    }
                    put_u64(w, m.params.len() as u64)?;
                    put_f64s(w, &m.params)?;
                    match opt {
                        None => put_u8(w, 0)?,
                        Some(o) => {
                            put_u8(w, 1)?;
                            put_optimizer(w, o)?;
                        }
                    }
                }
                Entry::Vector(v) => {
                    put_u8(w, 1)?;
                    put_u64(w, v.len() as u64)?;
                    put_f64s(w, v)?;
                }
                Entry::Params(p) => {
                    put_u8(w, 2)?;
                    put_u64(w, p.values.len() as u64)?;
                    put_f64s(w, &p.values)?;
                    put_optimizer(w, &p.opt)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ApproxError> {
        if &get::<4>(r)? != MAGIC {
            return Err(ApproxError::Format("bad magic".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(ApproxError::Format(format!("unsupported version {version}")));
        }
        let step = get_u64(r)?;
        let meta = get_str(r)?;
        let count = get_u32(r)?;
        let mut entries = Vec::with_capacity(count.min(1024) as usize);
        for _ in 0..count {
            let name = get_str(r)?;
            let e = match get_u8(r)? {
                0 => {
                    let output = match get_u8(r)? {
                        0 => OutputActivation::Identity,
                        1 => OutputActivation::Exp,
                        k => return Err(ApproxError::Format(format!("bad activation {k}"))),
                    };
                    let layers = get_u32(r)? as usize;
                    let sizes = (0..layers)
                        .map(|_| get_u32(r).map(|s| s as usize))
                        .collect::<io::Result<Vec<_>>>()?;
                    let n = get_len(r, MAX_LEN)?;
                    let params = get_f64s(r, n)?;
                    let model = Mlp::from_parts(sizes, params, output)?;
                    let opt = match get_u8(r)? {
                        0 => None,
                        _ => Some(get_optimizer(r, n)?),
                    };
                    Entry::Model(model, opt)
                }
                1 => {
                    let n = get_len(r, MAX_LEN)?;
                    Entry::Vector(get_f64s(r, n)?)
                }
                2 => {
                    let n = get_len(r, MAX_LEN)?;
                    let values = get_f64s(r, n)?;
                    let opt = get_optimizer(r, n)?;
                    Entry::Params(ParamVector { values, opt })
                }
                k => return Err(ApproxError::Format(format!("bad entry kind {k}"))),
            };
            entries.push((name, e));
        }
        Ok(Checkpoint { step, meta, entries })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        self.write_to(&mut b).expect("writing to memory");
        b
    }

    pub fn from_bytes(mut b: &[u8]) -> Result<Self, ApproxError> {
        Checkpoint::read_from(&mut b)
    }

    pub fn save(&self, path: &Path) -> Result<(), ApproxError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ApproxError> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Checkpoint::read_from(&mut f)
    }
}

/// Squared error `(y − t)²` on output `index`, for use with [`Mlp::grad`].
pub fn squared_error(out: &[f64], index: usize, target: f64) -> (f64, Vec<f64>) {
    let mut d = vec![0.0; out.len()];
    let e = out[index] - target;
    d[index] = 2.0 * e;
    (e * e, d)
}
