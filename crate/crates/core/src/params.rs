//! Named parameter tree with per-group trainable flags and the `IVED`
//! checkpoint container.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"IVED";
const FORMAT_VERSION: u32 = 1;
const FLAGS_NAME: &str = "meta/flags";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Spatial,
    RefEnc,
    Motion,
    MotRef,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Spatial, Group::RefEnc, Group::Motion, Group::MotRef];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Spatial => "spatial/",
            Group::RefEnc => "refenc/",
            Group::Motion => "motion/",
            Group::MotRef => "motref/",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn of_name(name: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

/// Network sites in execution order, with their resolution level.
pub const SITES: [(&str, usize); 5] = [("enc0", 0), ("enc1", 1), ("mid", 2), ("dec1", 1), ("dec0", 0)];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_channels: usize,
    /// Spatial network width at each of the three levels.
    pub widths: [usize; 3],
    /// Reference pyramid channels per level.
    pub ref_channels: [usize; 3],
    pub embed_dim: usize,
    pub temb_dim: usize,
    pub motref_hidden: usize,
    pub res_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_channels: 48,
            widths: [64, 64, 64],
            ref_channels: [16, 32, 64],
            embed_dim: 64,
            temb_dim: 128,
            motref_hidden: 32,
            res_blocks: 2,
        }
    }
}

/// Width of the sinusoidal timestep features fed to the timestep MLP.
pub const TIME_FEATURES: usize = 32;

impl ModelConfig {
    /// Input channels of the spatial network: noised latent, masked latent,
    /// keep mask and depth.
    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0
            || self.widths.contains(&0)
            || self.ref_channels.contains(&0)
            || self.embed_dim == 0
            || self.temb_dim == 0
            || self.motref_hidden == 0
            || self.res_blocks == 0
        {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Every parameter's name, shape and initializer, in a fixed order.
    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
        let conv = |o: usize, i: usize, k: usize| (vec![o, i, k, k], Init::Normal((1.0 / (i * k * k) as f64).sqrt()));
        let lin = |i: usize, o: usize| (vec![i, o], Init::Normal((1.0 / i as f64).sqrt()));

        let w = self.widths;
        let td = self.temb_dim;
        let (s, i) = lin(TIME_FEATURES, td);
        add("spatial/temb.l1.w".into(), s, i);
        add("spatial/temb.l1.b".into(), vec![td], Init::Zeros);
        let (s, i) = lin(td, td);
        add("spatial/temb.l2.w".into(), s, i);
        add("spatial/temb.l2.b".into(), vec![td], Init::Zeros);
        let (s, i) = conv(w[0], self.input_channels(), 3);
        add("spatial/in.w".into(), s, i);
        add("spatial/in.b".into(), vec![w[0]], Init::Zeros);

        for (site, lvl) in SITES {
            let c = w[lvl];
            for r in 0..self.res_blocks {
                let cin = match (site, r) {
                    ("dec1", 0) => w[1] + w[1],
                    ("dec0", 0) => w[0] + w[0],
                    _ => c,
                };
                let p = format!("spatial/{site}.res{r}");
                let (s, i) = conv(c, cin, 3);
                add(format!("{p}.conv1.w"), s, i);
                add(format!("{p}.conv1.b"), vec![c], Init::Zeros);
                let (s, i) = lin(td, c);
                add(format!("{p}.temb.w"), s, i);
                add(format!("{p}.temb.b"), vec![c], Init::Zeros);
                let (s, i) = conv(c, c, 3);
                add(format!("{p}.conv2.w"), s, i.scaled(0.5));
                add(format!("{p}.conv2.b"), vec![c], Init::Zeros);
                if cin != c {
                    let (s, i) = conv(c, cin, 1);
                    add(format!("{p}.skip.w"), s, i);
                    add(format!("{p}.skip.b"), vec![c], Init::Zeros);
                }
            }
            let p = format!("spatial/{site}.xattn");
            let rc = self.ref_channels[lvl];
            for (n, i_dim) in [("q", c), ("k_lvl", rc), ("v_lvl", rc), ("k_glob", self.embed_dim), ("v_glob", self.embed_dim)] {
                let (s, i) = lin(i_dim, c);
                add(format!("{p}.{n}.w"), s, i);
                add(format!("{p}.{n}.b"), vec![c], Init::Zeros);
            }
            let (s, i) = lin(c, c);
            add(format!("{p}.out.w"), s, i.scaled(0.5));
            add(format!("{p}.out.b"), vec![c], Init::Zeros);
        }
        for (n, o, i_c, k) in [
            ("down0", w[1], w[0], 3),
            ("down1", w[2], w[1], 3),
            ("up1", w[1], w[2], 3),
            ("up0", w[0], w[1], 3),
            ("out", self.latent_channels, w[0], 3),
        ] {
            let (s, i) = conv(o, i_c, k);
            add(format!("spatial/{n}.w"), s, i);
            add(format!("spatial/{n}.b"), vec![o], Init::Zeros);
        }

        let rc = self.ref_channels;
        for (n, o, i_c) in [("c0", rc[0], self.latent_channels), ("c1", rc[1], rc[0]), ("c2", rc[2], rc[1])] {
            let (s, i) = conv(o, i_c, 3);
            add(format!("refenc/{n}.w"), s, i);
            add(format!("refenc/{n}.b"), vec![o], Init::Zeros);
        }
        let (s, i) = lin(rc[2], self.embed_dim);
        add("refenc/glob.w".into(), s, i);
        add("refenc/glob.b".into(), vec![self.embed_dim], Init::Zeros);
        add("refenc/null".into(), vec![self.embed_dim], Init::Normal(1.0));

        for (site, lvl) in SITES {
            let c = w[lvl];
            for n in ["q", "k", "v"] {
                let (s, i) = lin(c, c);
                add(format!("motion/{site}.{n}.w"), s, i);
                add(format!("motion/{site}.{n}.b"), vec![c], Init::Zeros);
            }
            add(format!("motion/{site}.out.w"), vec![c, c], Init::Zeros);
            add(format!("motion/{site}.out.b"), vec![c], Init::Zeros);
        }
        for (site, lvl) in SITES {
            let c = w[lvl];
            let hd = self.motref_hidden;
            let (s, i) = conv(hd, 2 * c + 2, 3);
            add(format!("motref/{site}.off1.w"), s, i);
            add(format!("motref/{site}.off1.b"), vec![hd], Init::Zeros);
            add(format!("motref/{site}.off2.w"), vec![2, hd, 3, 3], Init::Zeros);
            add(format!("motref/{site}.off2.b"), vec![2], Init::Zeros);
            add(format!("motref/{site}.gamma"), vec![1], Init::Zeros);
            add(format!("motref/{site}.alpha"), vec![1], Init::Const(1.0));
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
}

impl Init {
    fn scaled(self, c: f64) -> Init {
        match self {
            Init::Normal(s) => Init::Normal(s * c),
            other => other,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    frozen: [bool; 4],
    /// Whether the motion reference network is trained and reported as
    /// part of the model; when false it stays at its identity init.
    pub use_motref: bool,
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters; every group trainable.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in config.layout() {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Const(v) => Tensor::full(&shape, T::of(v)),
                Init::Normal(std) => Tensor::randn(&shape, std, &mut rng),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::assemble(config.clone(), names, tensors, [false; 4], true))
    }

    fn assemble(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor<T>>, frozen: [bool; 4], use_motref: bool) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ModelParams {
            config,
            names,
            tensors,
            index,
            frozen,
            use_motref,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        match self.index.get(name) {
            Some(&i) => &self.tensors[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        match self.index.get(name) {
            Some(&i) => &mut self.tensors[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn tensor(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn group(&self, id: usize) -> Group {
        Group::of_name(&self.names[id]).expect("every parameter has a group prefix")
    }

    pub fn ids_in(&self, group: Group) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.group(i) == group).collect()
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen[group.index()]
    }

    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        self.frozen[group.index()] = frozen;
    }

    /// Whether gradient updates may touch parameter `id`.
    pub fn is_trainable(&self, id: usize) -> bool {
        let g = self.group(id);
        !self.is_frozen(g) && (g != Group::MotRef || self.use_motref)
    }

    /// Bitwise equality of every tensor in `group`.
    pub fn group_bits_eq(&self, other: &ModelParams<T>, group: Group) -> bool {
        self.names == other.names
            && self
                .ids_in(group)
                .into_iter()
                .all(|i| self.tensors[i].bits_eq(&other.tensors[i]))
    }

    /// Replaces `group` with freshly initialized values from `seed`.
    pub fn reinit_group(&mut self, group: Group, seed: u64) -> Result<()> {
        let fresh = ModelParams::<T>::new(&self.config, seed)?;
        for i in self.ids_in(group) {
            self.tensors[i] = fresh.tensors[i].clone();
        }
        Ok(())
    }

    /// Copies `group` from another parameter set with the same layout.
    pub fn copy_group_from(&mut self, other: &ModelParams<T>, group: Group) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract("parameter layouts differ".into()));
        }
        for i in self.ids_in(group) {
            self.tensors[i] = other.tensors[i].clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams::assemble(
            self.config.clone(),
            self.names.clone(),
            self.tensors.iter().map(|t| t.cast()).collect(),
            self.frozen,
            self.use_motref,
        )
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Binds parameter `name` on `tape`, trainable iff its group is.
    pub fn bind(&self, tape: &mut Tape<T>, name: &str) -> Var {
        let id = self.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        tape.bind(id, &self.tensors[id], self.is_trainable(id))
    }

    fn flags(&self) -> [bool; 5] {
        [
            self.frozen[0],
            self.frozen[1],
            self.frozen[2],
            self.frozen[3],
            self.use_motref,
        ]
    }
}

fn push_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE_TAG);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serializes parameters and group flags into the checkpoint layout.
pub fn checkpoint_bytes<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&((params.len() + 1) as u32).to_le_bytes());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        push_tensor(&mut out, name, t);
    }
    let flags = Tensor::<T>::from_vec(
        &[5],
        params.flags().iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
    )
    .expect("flag tensor");
    push_tensor(&mut out, FLAGS_NAME, &flags);
    out
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint against the layout implied by `config`.
pub fn parse_checkpoint<T: Scalar>(bytes: &[u8], config: &ModelConfig) -> Result<ModelParams<T>> {
    let expected = ModelParams::<T>::new(config, 0)?;
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an IVED checkpoint".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut loaded: HashMap<String, Tensor<T>> = HashMap::new();
    let mut flags = None;
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = r.u8()?;
        if tag != T::DTYPE_TAG {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has dtype tag {tag}, expected {}",
                T::DTYPE_TAG
            )));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * T::BYTES)?;
        let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        let t = Tensor::from_vec(&shape, data)?;
        if name == FLAGS_NAME {
            flags = Some(t);
        } else if loaded.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for (name, want) in expected.names.iter().zip(&expected.tensors) {
        let t = loaded
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != want.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, config expects {:?}",
                t.shape(),
                want.shape()
            )));
        }
        tensors.push(t);
    }
    if let Some(name) = loaded.keys().min() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    let flags = flags.ok_or_else(|| Error::Checkpoint(format!("missing tensor {FLAGS_NAME}")))?;
    if flags.shape() != [5] {
        return Err(Error::Checkpoint(format!("tensor {FLAGS_NAME} has shape {:?}", flags.shape())));
    }
    let f: Vec<bool> = flags.data().iter().map(|&v| v != T::zero()).collect();
    Ok(ModelParams::assemble(
        config.clone(),
        expected.names,
        tensors,
        [f[0], f[1], f[2], f[3]],
        f[4],
    ))
}

pub fn load_checkpoint<T: Scalar>(path: &Path, config: &ModelConfig) -> Result<ModelParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            latent_channels: 12,
            widths: [8, 16, 16],
            ref_channels: [4, 8, 16],
            embed_dim: 16,
            temb_dim: 16,
            motref_hidden: 8,
            res_blocks: 1,
        }
    }

    #[test]
    fn every_parameter_has_one_group() {
        let p = ModelParams::<f32>::new(&ModelConfig::default(), 0).unwrap();
        let total: usize = Group::ALL.iter().map(|&g| p.ids_in(g).len()).sum();
        assert_eq!(total, p.len());
        for g in Group::ALL {
            assert!(!p.ids_in(g).is_empty());
        }
    }

    #[test]
    fn zero_init_contract() {
        let p = ModelParams::<f32>::new(&ModelConfig::default(), 5).unwrap();
        for (site, _) in SITES {
            assert_eq!(p.get(&format!("motion/{site}.out.w")).max_abs(), 0.0);
            assert_eq!(p.get(&format!("motion/{site}.out.b")).max_abs(), 0.0);
            assert_eq!(p.get(&format!("motref/{site}.off2.w")).max_abs(), 0.0);
            assert_eq!(p.get(&format!("motref/{site}.gamma")).data(), &[0.0]);
            assert_eq!(p.get(&format!("motref/{site}.alpha")).data(), &[1.0]);
        }
    }

    #[test]
    fn roundtrip_is_bitwise_with_flags() {
        let mut p = ModelParams::<f32>::new(&small(), 3).unwrap();
        p.set_frozen(Group::Spatial, true);
        p.use_motref = false;
        let bytes = checkpoint_bytes(&p);
        let q: ModelParams<f32> = parse_checkpoint(&bytes, &small()).unwrap();
        assert!(p.tensors.iter().zip(&q.tensors).all(|(a, b)| a.bits_eq(b)));
        assert!(q.is_frozen(Group::Spatial));
        assert!(!q.is_frozen(Group::Motion));
        assert!(!q.use_motref);
        assert_eq!(checkpoint_bytes(&q), bytes);
    }

    #[test]
    fn f64_roundtrip() {
        let p = ModelParams::<f64>::new(&small(), 3).unwrap();
        let q: ModelParams<f64> = parse_checkpoint(&checkpoint_bytes(&p), &small()).unwrap();
        assert_eq!(p, q);
        assert!(parse_checkpoint::<f32>(&checkpoint_bytes(&p), &small()).is_err());
    }

    #[test]
    fn header_layout() {
        let p = ModelParams::<f32>::new(&small(), 0).unwrap();
        let b = checkpoint_bytes(&p);
        assert_eq!(&b[..4], b"IVED");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize, p.len() + 1);
        let name_len = u16::from_le_bytes(b[12..14].try_into().unwrap()) as usize;
        assert_eq!(&b[14..14 + name_len], p.names[0].as_bytes());
        assert_eq!(b[14 + name_len], 0);
        assert_eq!(b[15 + name_len] as usize, p.tensors[0].rank());
    }

    #[test]
    fn truncated_file_rejected() {
        let p = ModelParams::<f32>::new(&small(), 0).unwrap();
        let b = checkpoint_bytes(&p);
        for cut in [3, 10, b.len() / 2, b.len() - 1] {
            assert!(matches!(parse_checkpoint::<f32>(&b[..cut], &small()), Err(Error::Checkpoint(_))));
        }
    }

    #[test]
    fn mismatched_config_names_first_tensor() {
        let p = ModelParams::<f32>::new(&small(), 0).unwrap();
        let other = ModelConfig {
            latent_channels: 24,
            ..small()
        };
        let err = parse_checkpoint::<f32>(&checkpoint_bytes(&p), &other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("spatial/in.w"), "{msg}");
    }

    #[test]
    fn trainable_flags_follow_groups() {
        let mut p = ModelParams::<f32>::new(&small(), 0).unwrap();
        let m = p.ids_in(Group::MotRef)[0];
        let s = p.ids_in(Group::Spatial)[0];
        assert!(p.is_trainable(m) && p.is_trainable(s));
        p.set_frozen(Group::Spatial, true);
        p.use_motref = false;
        assert!(!p.is_trainable(m) && !p.is_trainable(s));
    }

    #[test]
    fn reinit_and_copy_groups() {
        let a = ModelParams::<f32>::new(&small(), 1).unwrap();
        let mut b = ModelParams::<f32>::new(&small(), 2).unwrap();
        assert!(!a.group_bits_eq(&b, Group::Spatial));
        b.copy_group_from(&a, Group::Spatial).unwrap();
        assert!(a.group_bits_eq(&b, Group::Spatial));
        b.reinit_group(Group::Spatial, 2).unwrap();
        assert!(b.group_bits_eq(&ModelParams::new(&small(), 2).unwrap(), Group::Spatial));
    }
}
