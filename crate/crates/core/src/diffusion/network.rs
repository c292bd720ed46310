//! Trainable coupled denoiser.
//!
//! A three-stage convolutional encoder/decoder runs on every layer slot with
//! shared base weights. Two optional pieces sit on top of it:
//!
//! * a lateral coupling block at the lowest resolution that mixes features
//!   across slots, `h_i += (1 - g) (sum_j A_ij silu(P h_j) + e_i)`;
//! * an image adapter whose per-stage features are added after each encoder
//!   stage, scaled by `1 - g_in`.
//!
//! A gate value of 1 removes its block exactly, which recovers the base
//! model. All gradients are written out by hand.

use ndarray::{Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::latent::{encode_image, LATENT_CHANNELS};
use super::layers::{
    add_channel_bias, avg_pool2, avg_pool2_backward, concat_channels, conv_backward, conv_forward, silu,
    silu_backward, split_channels, sum_spatial, timestep_embedding, upsample2, upsample2_backward,
};
use super::{Conditioning, Denoiser, Features, NoiseSchedule};
use crate::compositor::CompositeImage;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Base per-layer denoiser.
    Theta,
    /// Lateral coupling.
    Phi,
    /// Image adapter and null embedding.
    Psi,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Theta, ParamGroup::Phi, ParamGroup::Psi];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub n_layers: usize,
    pub height: usize,
    pub width: usize,
    /// Base channels per stage, finest first.
    pub channels: [usize; 3],
    pub adapter_channels: [usize; 3],
    pub time_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            n_layers: 5,
            height: 32,
            width: 32,
            channels: [8, 16, 32],
            adapter_channels: [8, 16, 32],
            time_dim: 32,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Validation("n_layers must be positive".into()));
        }
        if self.height < 4 || self.width < 4 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Validation(format!(
                "spatial dims must be positive multiples of 4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels.contains(&0) || self.adapter_channels.contains(&0) {
            return Err(Error::Validation("channel counts must be positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Validation("time_dim must be a positive even number".into()));
        }
        Ok(())
    }

    fn stage_dims(&self, s: usize) -> (usize, usize) {
        (self.height >> s, self.width >> s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.tensors
            .iter()
            .filter(|t| group.map_or(true, |g| t.group == g))
            .map(|t| t.data.len())
            .sum()
    }

    /// SHA-256 over the little-endian bytes of every tensor in `group`.
    pub fn checksum(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for t in self.tensors.iter().filter(|t| t.group == group) {
            h.update(t.name.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: usize,
    b: usize,
    k: usize,
    c_in: usize,
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Ids {
    enc1a: ConvIds,
    enc1b: ConvIds,
    enc2a: ConvIds,
    enc2b: ConvIds,
    mid_a: ConvIds,
    mid_b: ConvIds,
    dec2: ConvIds,
    dec1: ConvIds,
    out: ConvIds,
    temb: [LinearIds; 3],
    couple_proj: ConvIds,
    couple_mix: usize,
    couple_slot: usize,
    couple_gate: usize,
    adapt: [ConvIds; 3],
    inject: [ConvIds; 3],
    null: [usize; 3],
    adapter_gate: usize,
}

enum Init {
    Normal(f64),
    Zeros,
    Constant(f64),
}

struct Layout {
    store: ParamStore,
    inits: Vec<Init>,
}

impl Layout {
    fn push(&mut self, name: &str, group: ParamGroup, shape: Vec<usize>, init: Init) -> usize {
        let n = shape.iter().product();
        self.store.tensors.push(Tensor {
            name: name.to_string(),
            group,
            shape,
            data: vec![0.0; n],
        });
        self.inits.push(init);
        self.store.tensors.len() - 1
    }

    fn conv(&mut self, name: &str, group: ParamGroup, c_in: usize, c_out: usize, k: usize, init: Init) -> ConvIds {
        let w = self.push(&format!("{name}.weight"), group, vec![c_out, c_in * k * k], init);
        let b = self.push(&format!("{name}.bias"), group, vec![c_out], Init::Zeros);
        ConvIds { w, b, k, c_in }
    }
}

fn he(fan_in: usize) -> Init {
    Init::Normal((2.0 / fan_in as f64).sqrt())
}

fn build_layout(arch: &ArchConfig) -> (Layout, Ids) {
    use ParamGroup::*;
    let [c1, c2, c3] = arch.channels;
    let [a1, a2, a3] = arch.adapter_channels;
    let td = arch.time_dim;
    let n = arch.n_layers;
    let c0 = LATENT_CHANNELS;
    let mut l = Layout {
        store: ParamStore::default(),
        inits: Vec::new(),
    };
    let enc1a = l.conv("enc1a", Theta, c0, c1, 3, he(9 * c0));
    let enc1b = l.conv("enc1b", Theta, c1, c1, 3, he(9 * c1));
    let enc2a = l.conv("enc2a", Theta, c1, c2, 3, he(9 * c1));
    let enc2b = l.conv("enc2b", Theta, c2, c2, 3, he(9 * c2));
    let mid_a = l.conv("mid_a", Theta, c2, c3, 3, he(9 * c2));
    let mid_b = l.conv("mid_b", Theta, c3, c3, 3, he(9 * c3));
    let dec2 = l.conv("dec2", Theta, c3 + c2, c2, 3, he(9 * (c3 + c2)));
    let dec1 = l.conv("dec1", Theta, c2 + c1, c1, 3, he(9 * (c2 + c1)));
    let out = l.conv("out", Theta, c1, c0, 3, Init::Normal((1.0 / (9 * c1) as f64).sqrt()));
    let mut temb = Vec::new();
    for (s, c) in [c1, c2, c3].into_iter().enumerate() {
        let w = l.push(
            &format!("temb{}.weight", s + 1),
            Theta,
            vec![c, td],
            Init::Normal((1.0 / td as f64).sqrt()),
        );
        let b = l.push(&format!("temb{}.bias", s + 1), Theta, vec![c], Init::Zeros);
        temb.push(LinearIds { w, b });
    }
    let couple_proj = l.conv("couple.proj", Phi, c3, c3, 1, Init::Normal((1.0 / c3 as f64).sqrt()));
    let couple_mix = l.push("couple.mix", Phi, vec![n, n], Init::Zeros);
    let couple_slot = l.push("couple.slot", Phi, vec![n, c3], Init::Zeros);
    let couple_gate = l.push("couple.gate", Phi, vec![1], Init::Constant(0.5));
    let adapt = [
        l.conv("adapt1", Psi, 3, a1, 3, he(27)),
        l.conv("adapt2", Psi, a1, a2, 3, he(9 * a1)),
        l.conv("adapt3", Psi, a2, a3, 3, he(9 * a2)),
    ];
    let inject = [
        l.conv("inject1", Psi, a1, c1, 1, Init::Zeros),
        l.conv("inject2", Psi, a2, c2, 1, Init::Zeros),
        l.conv("inject3", Psi, a3, c3, 1, Init::Zeros),
    ];
    let null = [
        l.push("null1", Psi, vec![c1], Init::Zeros),
        l.push("null2", Psi, vec![c2], Init::Zeros),
        l.push("null3", Psi, vec![c3], Init::Zeros),
    ];
    let adapter_gate = l.push("adapter.gate", Psi, vec![1], Init::Constant(0.5));
    let ids = Ids {
        enc1a,
        enc1b,
        enc2a,
        enc2b,
        mid_a,
        mid_b,
        dec2,
        dec1,
        out,
        temb: [temb[0], temb[1], temb[2]],
        couple_proj,
        couple_mix,
        couple_slot,
        couple_gate,
        adapt,
        inject,
        null,
        adapter_gate,
    };
    (l, ids)
}

/// Which parameter groups receive gradients during a backward pass.
pub(crate) struct GradSink {
    pub bufs: Vec<Vec<f64>>,
    groups: [bool; 3],
    tensor_groups: Vec<ParamGroup>,
}

impl GradSink {
    pub fn new(store: &ParamStore, groups: &[ParamGroup]) -> Self {
        let mut mask = [false; 3];
        for g in groups {
            mask[g.index()] = true;
        }
        GradSink {
            bufs: store.zero_grads(),
            groups: mask,
            tensor_groups: store.tensors.iter().map(|t| t.group).collect(),
        }
    }

    fn wants(&self, id: usize) -> bool {
        self.groups[self.tensor_groups[id].index()]
    }

    fn mat(&mut self, id: usize, shape: (usize, usize)) -> Option<ArrayViewMut2<'_, f64>> {
        if !self.wants(id) {
            return None;
        }
        Some(ArrayViewMut2::from_shape(shape, &mut self.bufs[id]).expect("grad shape"))
    }

    fn vec(&mut self, id: usize) -> Option<ArrayViewMut1<'_, f64>> {
        if !self.wants(id) {
            return None;
        }
        Some(ArrayViewMut1::from(&mut self.bufs[id][..]))
    }

    fn conv_pair(
        &mut self,
        w: usize,
        b: usize,
        shape: (usize, usize),
    ) -> (Option<ArrayViewMut2<'_, f64>>, Option<ArrayViewMut1<'_, f64>>) {
        if !self.wants(w) {
            return (None, None);
        }
        assert_eq!(b, w + 1);
        let (lo, hi) = self.bufs.split_at_mut(b);
        (
            Some(ArrayViewMut2::from_shape(shape, &mut lo[w][..]).expect("grad shape")),
            Some(ArrayViewMut1::from(&mut hi[0][..])),
        )
    }

    fn add_scalar(&mut self, id: usize, v: f64) {
        if self.wants(id) {
            self.bufs[id][0] += v;
        }
    }
}

struct CouplingTape {
    cols: Array2<f64>,
    pre: Array4<f64>,
    act: Array4<f64>,
    block: Array4<f64>,
}

pub(crate) struct Tape {
    skip: Vec<f64>,
    temb: Array2<f64>,
    c_e1a: Array2<f64>,
    pre_e1a: Array4<f64>,
    c_e1b: Array2<f64>,
    pre_e1b: Array4<f64>,
    c_e2a: Array2<f64>,
    pre_e2a: Array4<f64>,
    c_e2b: Array2<f64>,
    pre_e2b: Array4<f64>,
    c_ma: Array2<f64>,
    pre_ma: Array4<f64>,
    coupling: Option<CouplingTape>,
    c_mb: Array2<f64>,
    pre_mb: Array4<f64>,
    c_d2: Array2<f64>,
    pre_d2: Array4<f64>,
    c_d1: Array2<f64>,
    pre_d1: Array4<f64>,
    c_out: Array2<f64>,
    injected: Option<Features>,
}

pub(crate) struct AdapterTape {
    cols: [Array2<f64>; 3],
    pre: [Array4<f64>; 3],
    inject_cols: [Array2<f64>; 3],
}

/// The full model: base weights, coupling and adapter, plus the schedule it
/// was trained with.
#[derive(Clone, Debug)]
pub struct CoupledDenoiser {
    pub arch: ArchConfig,
    pub schedule: NoiseSchedule,
    pub params: ParamStore,
    /// Set once the base has been trained; later training must not touch it.
    pub theta_frozen: bool,
    ids: Ids,
}

impl CoupledDenoiser {
    /// Randomly initialised model.
    pub fn new(arch: ArchConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (mut layout, ids) = build_layout(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (t, init) in layout.store.tensors.iter_mut().zip(&layout.inits) {
            match init {
                Init::Zeros => {}
                Init::Constant(c) => t.data.fill(*c),
                Init::Normal(std) => {
                    let d = Normal::new(0.0, *std).expect("positive std");
                    t.data.iter_mut().for_each(|v| *v = d.sample(&mut rng));
                }
            }
        }
        Ok(CoupledDenoiser {
            arch,
            schedule,
            params: layout.store,
            theta_frozen: false,
            ids,
        })
    }

    /// Model with the given parameters, which must match the layout of `arch`.
    pub fn from_params(
        arch: ArchConfig,
        schedule: NoiseSchedule,
        params: ParamStore,
        theta_frozen: bool,
    ) -> Result<Self> {
        arch.validate()?;
        let (layout, ids) = build_layout(&arch);
        if layout.store.tensors.len() != params.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                layout.store.tensors.len(),
                params.tensors.len()
            )));
        }
        for (a, b) in layout.store.tensors.iter().zip(&params.tensors) {
            if a.name != b.name || a.shape != b.shape || a.group != b.group {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
            if b.data.len() != a.data.len() {
                return Err(Error::Format(format!("tensor {} has wrong length", b.name)));
            }
        }
        let model = CoupledDenoiser {
            arch,
            schedule,
            params,
            theta_frozen,
            ids,
        };
        model.check_gates()?;
        Ok(model)
    }

    fn check_gates(&self) -> Result<()> {
        for g in [self.coupling_gate(), self.adapter_gate()] {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Validation(format!("gate {g} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn coupling_gate(&self) -> f64 {
        self.params.tensors[self.ids.couple_gate].data[0]
    }

    pub fn adapter_gate(&self) -> f64 {
        self.params.tensors[self.ids.adapter_gate].data[0]
    }

    pub fn set_gates(&mut self, coupling: f64, adapter: f64) -> Result<()> {
        self.params.tensors[self.ids.couple_gate].data[0] = coupling;
        self.params.tensors[self.ids.adapter_gate].data[0] = adapter;
        self.check_gates()
    }

    pub(crate) fn clamp_gates(&mut self) {
        for id in [self.ids.couple_gate, self.ids.adapter_gate] {
            let v = &mut self.params.tensors[id].data[0];
            *v = v.clamp(0.0, 1.0);
        }
    }

    fn mat(&self, id: usize) -> ArrayView2<'_, f64> {
        let t = &self.params.tensors[id];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("matrix shape")
    }

    fn vec(&self, id: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params.tensors[id].data[..])
    }

    fn conv(&self, x: &Array4<f64>, c: ConvIds) -> (Array4<f64>, Array2<f64>) {
        conv_forward(x, self.mat(c.w), self.vec(c.b), c.k)
    }

    fn conv_back(
        &self,
        g: &Array4<f64>,
        cols: &Array2<f64>,
        c: ConvIds,
        sink: &mut Option<&mut GradSink>,
        need_input: bool,
    ) -> Option<Array4<f64>> {
        let wshape = self.mat(c.w).dim();
        let (gw, gb) = match sink {
            Some(s) => s.conv_pair(c.w, c.b, wshape),
            None => (None, None),
        };
        conv_backward(g, cols, self.mat(c.w), c.k, c.c_in, gw, gb, need_input)
    }

    fn temb_bias(&self, temb: &Array2<f64>, s: usize) -> Array2<f64> {
        let ids = self.ids.temb[s];
        let mut out = temb.dot(&self.mat(ids.w).t());
        out += &self.vec(ids.b);
        out
    }

    fn temb_back(&self, temb: &Array2<f64>, d_pre: &Array4<f64>, s: usize, sink: &mut Option<&mut GradSink>) {
        let Some(sink) = sink else { return };
        let ids = self.ids.temb[s];
        let g = sum_spatial(d_pre);
        let shape = self.mat(ids.w).dim();
        if let Some(mut gw) = sink.mat(ids.w, shape) {
            gw += &g.t().dot(temb);
        }
        if let Some(mut gb) = sink.vec(ids.b) {
            gb += &g.sum_axis(Axis(0));
        }
    }

    /// Features of the learned null embedding, broadcast over space.
    pub fn null_features(&self) -> Features {
        Features(
            (0..3)
                .map(|s| {
                    let (h, w) = self.arch.stage_dims(s);
                    let v = self.vec(self.ids.null[s]);
                    Array3::from_shape_fn((v.len(), h, w), |(c, _, _)| v[c])
                })
                .collect(),
        )
    }

    /// Adapter features of an encoded image (`3 x H x W`).
    pub(crate) fn adapter_forward(&self, image: &Array3<f64>) -> (Features, AdapterTape) {
        let mut x = image.clone().insert_axis(Axis(0));
        let mut feats = Vec::with_capacity(3);
        let mut cols = Vec::with_capacity(3);
        let mut pres = Vec::with_capacity(3);
        let mut inject_cols = Vec::with_capacity(3);
        for s in 0..3 {
            if s > 0 {
                x = avg_pool2(&x);
            }
            let (pre, c) = self.conv(&x, self.ids.adapt[s]);
            let act = silu(&pre);
            let (f, ic) = self.conv(&act, self.ids.inject[s]);
            feats.push(f.index_axis(Axis(0), 0).to_owned());
            cols.push(c);
            pres.push(pre);
            inject_cols.push(ic);
            x = act;
        }
        let to3 = |v: Vec<Array2<f64>>| -> [Array2<f64>; 3] { v.try_into().expect("three stages") };
        let to3b = |v: Vec<Array4<f64>>| -> [Array4<f64>; 3] { v.try_into().expect("three stages") };
        (
            Features(feats),
            AdapterTape {
                cols: to3(cols),
                pre: to3b(pres),
                inject_cols: to3(inject_cols),
            },
        )
    }

    pub(crate) fn adapter_backward(&self, tape: &AdapterTape, d_feat: &[Array3<f64>], sink: &mut GradSink) {
        let mut sink = Some(sink);
        let mut carry: Option<Array4<f64>> = None;
        for s in (0..3).rev() {
            let df = d_feat[s].clone().insert_axis(Axis(0));
            let mut d_act = self
                .conv_back(&df, &tape.inject_cols[s], self.ids.inject[s], &mut sink, true)
                .unwrap();
            if let Some(c) = carry.take() {
                d_act += &c;
            }
            let d_pre = silu_backward(&tape.pre[s], &d_act);
            if s == 0 {
                self.conv_back(&d_pre, &tape.cols[s], self.ids.adapt[s], &mut sink, false);
            } else {
                let d_in = self
                    .conv_back(&d_pre, &tape.cols[s], self.ids.adapt[s], &mut sink, true)
                    .unwrap();
                let (h, w) = self.arch.stage_dims(s - 1);
                carry = Some(avg_pool2_backward(&d_in, h, w));
            }
        }
    }

    /// Accumulates the null-embedding gradient from feature gradients.
    pub(crate) fn null_backward(&self, d_feat: &[Array3<f64>], sink: &mut GradSink) {
        for (s, d) in d_feat.iter().enumerate() {
            if let Some(mut g) = sink.vec(self.ids.null[s]) {
                g += &d.sum_axis(Axis(2)).sum_axis(Axis(1));
            }
        }
    }

    fn check_input(&self, z: &Array4<f64>, coupled: bool) -> Result<()> {
        let (n, c, h, w) = z.dim();
        if c != LATENT_CHANNELS || h != self.arch.height || w != self.arch.width {
            return Err(Error::Structural(format!(
                "latent {:?} does not match model {}x{}x{}",
                z.dim(),
                LATENT_CHANNELS,
                self.arch.height,
                self.arch.width
            )));
        }
        if coupled && n % self.arch.n_layers != 0 {
            return Err(Error::Structural(format!(
                "coupled model expects groups of {} slots, got {n}",
                self.arch.n_layers
            )));
        }
        Ok(())
    }

    fn adds_features(&self, coupled: bool, features: Option<&Features>) -> bool {
        coupled && features.is_some() && self.adapter_gate() < 1.0
    }

    fn adds_coupling(&self, coupled: bool) -> bool {
        coupled && self.coupling_gate() < 1.0
    }

    /// Forward pass over `rows` slots with per-row timesteps. When coupled,
    /// consecutive groups of `n_layers` rows form one stack.
    pub(crate) fn forward(
        &self,
        z: &Array4<f64>,
        t: &[usize],
        features: Option<&Features>,
        coupled: bool,
    ) -> (Array4<f64>, Tape) {
        let td = self.arch.time_dim;
        let rows = z.dim().0;
        let mut temb = Array2::<f64>::zeros((rows, td));
        for (mut r, &tt) in temb.outer_iter_mut().zip(t) {
            r.assign(&timestep_embedding(tt, td));
        }
        let inject = self.adds_features(coupled, features);
        let gi = 1.0 - self.adapter_gate();
        let add_feat = |h: &mut Array4<f64>, s: usize| {
            if inject {
                let f = &features.unwrap().0[s];
                for mut row in h.outer_iter_mut() {
                    row.scaled_add(gi, f);
                }
            }
        };

        let (mut pre_e1a, c_e1a) = self.conv(z, self.ids.enc1a);
        add_channel_bias(&mut pre_e1a, &self.temb_bias(&temb, 0));
        let (pre_e1b, c_e1b) = self.conv(&silu(&pre_e1a), self.ids.enc1b);
        let mut h1 = silu(&pre_e1b);
        add_feat(&mut h1, 0);

        let (mut pre_e2a, c_e2a) = self.conv(&avg_pool2(&h1), self.ids.enc2a);
        add_channel_bias(&mut pre_e2a, &self.temb_bias(&temb, 1));
        let (pre_e2b, c_e2b) = self.conv(&silu(&pre_e2a), self.ids.enc2b);
        let mut h2 = silu(&pre_e2b);
        add_feat(&mut h2, 1);

        let (mut pre_ma, c_ma) = self.conv(&avg_pool2(&h2), self.ids.mid_a);
        add_channel_bias(&mut pre_ma, &self.temb_bias(&temb, 2));
        let mut m = silu(&pre_ma);
        let coupling = if self.adds_coupling(coupled) {
            let (pre, cols) = self.conv(&m, self.ids.couple_proj);
            let act = silu(&pre);
            let block = self.mix_slots(&act);
            m.scaled_add(1.0 - self.coupling_gate(), &block);
            Some(CouplingTape { cols, pre, act, block })
        } else {
            None
        };
        let (pre_mb, c_mb) = self.conv(&m, self.ids.mid_b);
        let mut h3 = silu(&pre_mb);
        add_feat(&mut h3, 2);

        let (hh, hw) = self.arch.stage_dims(1);
        let cat2 = concat_channels(&upsample2(&h3, hh, hw), &h2);
        let (pre_d2, c_d2) = self.conv(&cat2, self.ids.dec2);
        let (h, w) = self.arch.stage_dims(0);
        let cat1 = concat_channels(&upsample2(&silu(&pre_d2), h, w), &h1);
        let (pre_d1, c_d1) = self.conv(&cat1, self.ids.dec1);
        let (mut out, c_out) = self.conv(&silu(&pre_d1), self.ids.out);
        let skip: Vec<f64> = t.iter().map(|&tt| self.input_skip(tt)).collect();
        for ((mut o, zr), &k) in out.outer_iter_mut().zip(z.outer_iter()).zip(&skip) {
            o.scaled_add(k, &zr);
        }
        let tape = Tape {
            skip,
            temb,
            c_e1a,
            pre_e1a,
            c_e1b,
            pre_e1b,
            c_e2a,
            pre_e2a,
            c_e2b,
            pre_e2b,
            c_ma,
            pre_ma,
            coupling,
            c_mb,
            pre_mb,
            c_d2,
            pre_d2,
            c_d1,
            pre_d1,
            c_out,
            injected: if inject { features.cloned() } else { None },
        };
        (out, tape)
    }

    /// `block[g*N + i] = sum_j A_ij act[g*N + j] + e_i`.
    /// Weight of the direct input-to-output path, `sqrt(1 - alpha_bar_t)`,
    /// so the network only learns the correction at high noise.
    fn input_skip(&self, t: usize) -> f64 {
        self.schedule.alpha_bar(t).map(|a| (1.0 - a).sqrt()).unwrap_or(1.0)
    }

    fn mix_slots(&self, act: &Array4<f64>) -> Array4<f64> {
        let n = self.arch.n_layers;
        let a = self.mat(self.ids.couple_mix);
        let e = self.mat(self.ids.couple_slot);
        let mut block = Array4::<f64>::zeros(act.dim());
        for g in 0..act.dim().0 / n {
            for i in 0..n {
                let mut dst = block.index_axis_mut(Axis(0), g * n + i);
                for j in 0..n {
                    let aij = a[[i, j]];
                    if aij != 0.0 {
                        dst.scaled_add(aij, &act.index_axis(Axis(0), g * n + j));
                    }
                }
                for (mut ch, &ev) in dst.outer_iter_mut().zip(e.row(i)) {
                    ch.mapv_inplace(|v| v + ev);
                }
            }
        }
        block
    }

    /// Backpropagates `d_out`. Parameter gradients go to `sink` (if any);
    /// returns the latent gradient when `need_input` is set and the gradient
    /// with respect to the injected per-stage features (summed over rows).
    pub(crate) fn backward(
        &self,
        tape: &Tape,
        d_out: &Array4<f64>,
        mut sink: Option<&mut GradSink>,
        need_input: bool,
    ) -> (Option<Array4<f64>>, Option<Vec<Array3<f64>>>) {
        let ids = &self.ids;
        let c2 = self.arch.channels[1];
        let gi = 1.0 - self.adapter_gate();
        let mut d_feat: Option<Vec<Array3<f64>>> = tape.injected.as_ref().map(|_| Vec::new());
        let mut feat_back = |d_h: &Array4<f64>, s: usize, sink: &mut Option<&mut GradSink>| {
            if let (Some(f), Some(df)) = (tape.injected.as_ref(), d_feat.as_mut()) {
                let summed = d_h.sum_axis(Axis(0));
                if let Some(sk) = sink.as_deref_mut() {
                    sk.add_scalar(ids.adapter_gate, -(&summed * &f.0[s]).sum());
                }
                df.push(summed * gi);
            }
        };

        let d_a1 = self.conv_back(d_out, &tape.c_out, ids.out, &mut sink, true).unwrap();
        let d_pre_d1 = silu_backward(&tape.pre_d1, &d_a1);
        let d_cat1 = self.conv_back(&d_pre_d1, &tape.c_d1, ids.dec1, &mut sink, true).unwrap();
        let (d_up1, mut d_h1) = split_channels(&d_cat1, c2);
        let (hh, hw) = self.arch.stage_dims(1);
        let d_a2 = upsample2_backward(&d_up1, hh, hw);
        let d_pre_d2 = silu_backward(&tape.pre_d2, &d_a2);
        let d_cat2 = self.conv_back(&d_pre_d2, &tape.c_d2, ids.dec2, &mut sink, true).unwrap();
        let (qh, qw) = self.arch.stage_dims(2);
        let (d_up2, mut d_h2) = split_channels(&d_cat2, self.arch.channels[2]);
        let d_h3 = upsample2_backward(&d_up2, qh, qw);

        feat_back(&d_h3, 2, &mut sink);
        let d_pre_mb = silu_backward(&tape.pre_mb, &d_h3);
        let d_m = self.conv_back(&d_pre_mb, &tape.c_mb, ids.mid_b, &mut sink, true).unwrap();
        let mut d_ma = d_m.clone();
        if let Some(ct) = &tape.coupling {
            let g = self.coupling_gate();
            if let Some(sk) = sink.as_deref_mut() {
                sk.add_scalar(ids.couple_gate, -(&d_m * &ct.block).sum());
            }
            let d_block = d_m.mapv(|v| v * (1.0 - g));
            let d_act = self.mix_slots_backward(&d_block, &ct.act, &mut sink);
            let d_pre = silu_backward(&ct.pre, &d_act);
            let d_in = self
                .conv_back(&d_pre, &ct.cols, ids.couple_proj, &mut sink, true)
                .unwrap();
            d_ma += &d_in;
        }
        let d_pre_ma = silu_backward(&tape.pre_ma, &d_ma);
        self.temb_back(&tape.temb, &d_pre_ma, 2, &mut sink);
        let d_p2 = self.conv_back(&d_pre_ma, &tape.c_ma, ids.mid_a, &mut sink, true).unwrap();
        d_h2 += &avg_pool2_backward(&d_p2, hh, hw);

        feat_back(&d_h2, 1, &mut sink);
        let d_pre_e2b = silu_backward(&tape.pre_e2b, &d_h2);
        let d_a = self.conv_back(&d_pre_e2b, &tape.c_e2b, ids.enc2b, &mut sink, true).unwrap();
        let d_pre_e2a = silu_backward(&tape.pre_e2a, &d_a);
        self.temb_back(&tape.temb, &d_pre_e2a, 1, &mut sink);
        let d_p1 = self.conv_back(&d_pre_e2a, &tape.c_e2a, ids.enc2a, &mut sink, true).unwrap();
        let (h, w) = self.arch.stage_dims(0);
        d_h1 += &avg_pool2_backward(&d_p1, h, w);

        feat_back(&d_h1, 0, &mut sink);
        let d_pre_e1b = silu_backward(&tape.pre_e1b, &d_h1);
        let d_a = self.conv_back(&d_pre_e1b, &tape.c_e1b, ids.enc1b, &mut sink, true).unwrap();
        let d_pre_e1a = silu_backward(&tape.pre_e1a, &d_a);
        self.temb_back(&tape.temb, &d_pre_e1a, 0, &mut sink);
        let mut d_z = self.conv_back(&d_pre_e1a, &tape.c_e1a, ids.enc1a, &mut sink, need_input);
        if let Some(dz) = d_z.as_mut() {
            for ((mut r, dr), &k) in dz.outer_iter_mut().zip(d_out.outer_iter()).zip(&tape.skip) {
                r.scaled_add(k, &dr);
            }
        }
        let d_feat = d_feat.map(|mut v| {
            v.reverse();
            v
        });
        (d_z, d_feat)
    }

    fn mix_slots_backward(
        &self,
        d_block: &Array4<f64>,
        act: &Array4<f64>,
        sink: &mut Option<&mut GradSink>,
    ) -> Array4<f64> {
        let n = self.arch.n_layers;
        let a = self.mat(self.ids.couple_mix);
        let groups = act.dim().0 / n;
        let mut d_act = Array4::<f64>::zeros(act.dim());
        for g in 0..groups {
            for i in 0..n {
                let db = d_block.index_axis(Axis(0), g * n + i);
                for j in 0..n {
                    d_act
                        .index_axis_mut(Axis(0), g * n + j)
                        .scaled_add(a[[i, j]], &db);
                }
            }
        }
        if let Some(sk) = sink.as_deref_mut() {
            if let Some(mut ga) = sk.mat(self.ids.couple_mix, (n, n)) {
                for g in 0..groups {
                    for i in 0..n {
                        let db = d_block.index_axis(Axis(0), g * n + i);
                        for j in 0..n {
                            ga[[i, j]] += (&db * &act.index_axis(Axis(0), g * n + j)).sum();
                        }
                    }
                }
            }
            let c3 = self.arch.channels[2];
            if let Some(mut ge) = sk.mat(self.ids.couple_slot, (n, c3)) {
                let sums = sum_spatial(d_block);
                for g in 0..groups {
                    for i in 0..n {
                        let mut row = ge.row_mut(i);
                        row += &sums.row(g * n + i);
                    }
                }
            }
        }
        d_act
    }

    fn features_for<'a>(&self, cond: &'a Conditioning, null: &'a mut Option<Features>) -> &'a Features {
        match cond {
            Conditioning::Image(f) => f,
            Conditioning::Null => null.insert(self.null_features()),
        }
    }
}

impl Denoiser for CoupledDenoiser {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn condition(&self, image: &CompositeImage) -> Result<Conditioning> {
        if image.dims() != (self.arch.height, self.arch.width) {
            return Err(Error::Structural(format!(
                "image is {:?}, model expects {}x{}",
                image.dims(),
                self.arch.height,
                self.arch.width
            )));
        }
        let (f, _) = self.adapter_forward(&encode_image(&image.pixels));
        Ok(Conditioning::Image(std::sync::Arc::new(f)))
    }

    fn eps(&self, z: &Array4<f64>, t: usize, cond: &Conditioning, coupled: bool) -> Result<Array4<f64>> {
        self.check_input(z, coupled)?;
        self.schedule.alpha_bar(t)?;
        let mut null = None;
        let f = self.features_for(cond, &mut null);
        let ts = vec![t; z.dim().0];
        Ok(self.forward(z, &ts, Some(f), coupled).0)
    }

    fn eps_vjp(
        &self,
        z: &Array4<f64>,
        t: usize,
        cond: &Conditioning,
        coupled: bool,
        grad: &Array4<f64>,
    ) -> Result<Array4<f64>> {
        self.check_input(z, coupled)?;
        if grad.dim() != z.dim() {
            return Err(Error::Structural("gradient shape differs from latent".into()));
        }
        let mut null = None;
        let f = self.features_for(cond, &mut null);
        let ts = vec![t; z.dim().0];
        let (_, tape) = self.forward(z, &ts, Some(f), coupled);
        Ok(self.backward(&tape, grad, None, true).0.unwrap())
    }

    fn prefers_exact_gradient(&self) -> bool {
        false
    }
}

pub(crate) fn add_into(acc: &mut [Vec<f64>], other: &[Vec<f64>]) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}
