//! Task streams, IDX parsing, synthetic cluster tasks and checkpoints.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::distributions::{BernoulliVec, DiagGaussian};
use crate::error::{Error, Result};
use crate::prior::{MixturePrior, PriorComponent};
use crate::trainer::{BankEntry, ContinualState, RegularizerBank};
use crate::vae::{MlpSpec, VaeModel};

/// Contents of an IDX file: dimension sizes and values scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl IdxArray {
    /// First dimension as rows, the rest flattened.
    pub fn into_tensor(self) -> Result<Tensor> {
        let rows = self.dims.first().copied().unwrap_or(0);
        let cols = self.dims.iter().skip(1).product::<usize>();
        Tensor::new(vec![rows, cols], self.data)
    }
}

pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;

/// Parses unsigned-byte IDX data. Values are divided by 255.
pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Data("IDX header truncated".into()));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if magic != expected_magic {
        return Err(Error::BadMagic {
            expected: format!("{expected_magic:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Data("IDX dimensions truncated".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Data(format!("IDX dimensions {dims:?} overflow")))?;
    let payload = &bytes[header..];
    if payload.len() < total {
        return Err(Error::Data(format!(
            "IDX payload truncated: expected {total} bytes, found {}",
            payload.len()
        )));
    }
    let data = payload[..total].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(IdxArray { dims, data })
}

pub fn load_idx(path: &Path, expected_magic: u32) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_idx(&bytes, expected_magic)
}

pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    load_idx(path, IDX_IMAGES)?.into_tensor()
}

/// Raw label bytes.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let arr = load_idx(path, IDX_LABELS)?;
    Ok(arr.data.iter().map(|v| (v * 255.0).round() as u8).collect())
}

/// Writes unsigned-byte IDX data.
pub fn write_idx(dims: &[usize], values: &[u8], magic: u32) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(values);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub examples: Tensor,
    /// Class of each example; used for evaluation only.
    pub labels: Vec<u8>,
    pub classes: Vec<u8>,
}

impl Task {
    pub fn len(&self) -> usize {
        self.examples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.tasks.iter().map(Task::len).collect()
    }

    /// All examples of every task, with the task index as label.
    pub fn concat(&self) -> Result<(Tensor, Vec<usize>)> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (t, task) in self.tasks.iter().enumerate() {
            for i in 0..task.len() {
                rows.push(task.examples.row(i));
                labels.push(t);
            }
        }
        Ok((Tensor::from_rows(&rows)?, labels))
    }

    /// The first `n` tasks.
    pub fn prefix(&self, n: usize) -> TaskStream {
        TaskStream {
            tasks: self.tasks.iter().take(n).cloned().collect(),
        }
    }
}

/// Splits by class in ascending order, `classes_per_task` classes per task,
/// over every class present in `labels`.
pub fn make_class_split_stream(images: &Tensor, labels: &[u8], classes_per_task: usize) -> Result<TaskStream> {
    let classes: Vec<u8> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    make_class_split_stream_for(images, labels, &classes, classes_per_task)
}

/// Like [`make_class_split_stream`] over an explicit class list.
pub fn make_class_split_stream_for(
    images: &Tensor,
    labels: &[u8],
    classes: &[u8],
    classes_per_task: usize,
) -> Result<TaskStream> {
    if images.rows() != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.rows(),
            labels.len()
        )));
    }
    if classes_per_task == 0 {
        return Err(Error::Data("classes_per_task must be positive".into()));
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Data("class requested more than once".into()));
    }
    for c in &sorted {
        if !labels.contains(c) {
            return Err(Error::Data(format!("class {c} missing from labels")));
        }
    }
    let mut tasks = Vec::new();
    for group in sorted.chunks(classes_per_task) {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| group.contains(&labels[i])).collect();
        tasks.push(Task {
            examples: images.select_rows(&idx),
            labels: idx.iter().map(|&i| labels[i]).collect(),
            classes: group.to_vec(),
        });
    }
    Ok(TaskStream { tasks })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Binarize {
    #[default]
    None,
    /// `x >= 0.5` maps to 1, everything else to 0.
    Threshold,
}

pub fn binarize(images: &Tensor, mode: Binarize) -> Tensor {
    match mode {
        Binarize::None => images.clone(),
        Binarize::Threshold => {
            let data = images.data().iter().map(|&x| if x >= 0.5 { 1.0 } else { 0.0 }).collect();
            Tensor::new(images.shape().to_vec(), data).expect("finite")
        }
    }
}

/// Generative parameters behind [`synthetic_cluster_tasks`]: task `t` draws
/// `s ~ N(centers[t], cluster_std^2 I)` in 2-D and emits
/// `sigmoid(sharpness * (s W + offset))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    pub centers: Vec<[f64; 2]>,
    pub cluster_std: f64,
    /// `[2, dim]`
    pub embedding: Tensor,
    pub offset: Vec<f64>,
    pub sharpness: f64,
    /// Source points per task, `[n_per_task, 2]`.
    pub sources: Vec<Tensor>,
}

impl SyntheticTruth {
    pub fn embed(&self, s: &[f64]) -> Vec<f64> {
        let w = &self.embedding;
        let dim = w.row_len();
        (0..dim)
            .map(|j| {
                let a = s[0] * w.row(0)[j] + s[1] * w.row(1)[j] + self.offset[j];
                1.0 / (1.0 + (-self.sharpness * a).exp())
            })
            .collect()
    }
}

pub const SYNTHETIC_CLUSTER_STD: f64 = 0.5;
pub const SYNTHETIC_SHARPNESS: f64 = 4.0;

/// One isotropic 2-D Gaussian cluster per task, centers evenly spaced on a
/// circle with neighbouring centers `separation` apart, embedded into
/// `[0, 1]^dim`. The embedding weights are scaled by the circle's radius so
/// pixel logits stay comparable across separations.
pub fn synthetic_cluster_tasks<R: Rng + ?Sized>(
    n_tasks: usize,
    n_per_task: usize,
    dim: usize,
    separation: f64,
    rng: &mut R,
) -> Result<(TaskStream, SyntheticTruth)> {
    if !(separation > 0.0) {
        return Err(Error::InvalidArgument("separation must be positive".into()));
    }
    if n_tasks == 0 || dim == 0 {
        return Err(Error::InvalidArgument("need at least one task and one dimension".into()));
    }
    let radius = if n_tasks == 1 {
        0.0
    } else {
        separation / (2.0 * (std::f64::consts::PI / n_tasks as f64).sin())
    };
    let centers: Vec<[f64; 2]> = (0..n_tasks)
        .map(|t| {
            let a = 2.0 * std::f64::consts::PI * t as f64 / n_tasks as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect();
    let scale = 1.0 / radius.max(1.0);
    let w: Vec<f64> = (0..2 * dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut truth = SyntheticTruth {
        centers,
        cluster_std: SYNTHETIC_CLUSTER_STD,
        embedding: Tensor::new(vec![2, dim], w)?,
        offset: (0..dim).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect(),
        sharpness: SYNTHETIC_SHARPNESS,
        sources: Vec::new(),
    };
    let mut tasks = Vec::new();
    for t in 0..n_tasks {
        let c = truth.centers[t];
        let mut src = Vec::with_capacity(2 * n_per_task);
        let mut rows = Vec::with_capacity(n_per_task * dim);
        for _ in 0..n_per_task {
            let s = [
                c[0] + truth.cluster_std * rng.sample::<f64, _>(StandardNormal),
                c[1] + truth.cluster_std * rng.sample::<f64, _>(StandardNormal),
            ];
            rows.extend(truth.embed(&s));
            src.extend(s);
        }
        truth.sources.push(Tensor::new(vec![n_per_task, 2], src)?);
        tasks.push(Task {
            examples: Tensor::new(vec![n_per_task, dim], rows)?,
            labels: vec![t as u8; n_per_task],
            classes: vec![t as u8],
        });
    }
    Ok((TaskStream { tasks }, truth))
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BOOVAE01";

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// The run configuration as `key=value` text.
    pub config: String,
    pub state: ContinualState,
    pub rng: ChaCha8Rng,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: usize) {
        self.0.extend((v as u64).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn vec(&mut self, v: &[f64]) {
        self.u64(v.len());
        for &x in v {
            self.f64(x);
        }
    }
    fn gaussian(&mut self, g: &DiagGaussian) {
        self.vec(&g.mean);
        self.vec(&g.log_var);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Data(format!("section {} truncated", self.section)));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Data(format!("size overflow in {}", self.section)))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > self.buf.len() {
            return Err(Error::Data(format!("section {} truncated", self.section)));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn gaussian(&mut self) -> Result<DiagGaussian> {
        let m = self.vec()?;
        let lv = self.vec()?;
        DiagGaussian::new(m, lv)
    }
    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!("trailing bytes in section {}", self.section)))
        }
    }
}

fn write_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend((payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend(crc32fast::hash(payload).to_le_bytes());
}

/// Serializes a checkpoint into the binary format.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    write_section(&mut out, b"CONF", ck.config.as_bytes());

    let model = &ck.state.model;
    let spec = model.spec();
    let mut w = Writer::default();
    w.u64(spec.input_dim);
    w.u64(spec.hidden.len());
    for &h in &spec.hidden {
        w.u64(h);
    }
    w.u64(spec.latent_dim);
    for p in model.params() {
        w.vec(p.data());
    }
    write_section(&mut out, b"MODL", &w.0);

    let mut w = Writer::default();
    w.u64(ck.state.prior.len());
    for c in ck.state.prior.components() {
        w.u64(c.task_id);
        w.f64(c.log_weight);
        w.vec(&c.pseudo_input);
        w.gaussian(&c.snapshot);
    }
    write_section(&mut out, b"PRIO", &w.0);

    let mut w = Writer::default();
    w.u64(ck.state.bank.len());
    for e in &ck.state.bank.entries {
        w.u64(e.task_id);
        w.vec(&e.pseudo_input);
        w.gaussian(&e.posterior);
        w.u64(e.latents.len());
        for (z, d) in e.latents.iter().zip(&e.decoded) {
            w.vec(z);
            w.vec(d.means());
        }
    }
    write_section(&mut out, b"BANK", &w.0);

    let mut w = Writer::default();
    w.u64(ck.state.seen_counts.len());
    for &n in &ck.state.seen_counts {
        w.u64(n);
    }
    write_section(&mut out, b"SEEN", &w.0);

    let mut rng = ck.rng.get_seed().to_vec();
    rng.extend(ck.rng.get_stream().to_le_bytes());
    rng.extend(ck.rng.get_word_pos().to_le_bytes());
    write_section(&mut out, b"RNGS", &rng);
    out
}

fn read_section<'a>(buf: &mut &'a [u8], tag: &'static str) -> Result<&'a [u8]> {
    let trunc = || Error::Data(format!("checkpoint truncated in section {tag}"));
    if buf.len() < 12 {
        return Err(trunc());
    }
    if &buf[..4] != tag.as_bytes() {
        return Err(Error::Data(format!(
            "expected section {tag}, found {:?}",
            String::from_utf8_lossy(&buf[..4])
        )));
    }
    let len = u64::from_le_bytes(buf[4..12].try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| trunc())?;
    let end = 12usize.checked_add(len).and_then(|e| e.checked_add(4)).ok_or_else(trunc)?;
    if buf.len() < end {
        return Err(trunc());
    }
    let payload = &buf[12..12 + len];
    let crc = u32::from_le_bytes(buf[12 + len..end].try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != crc {
        return Err(Error::Checksum { section: tag.into() });
    }
    *buf = &buf[end..];
    Ok(payload)
}

/// Parses the binary format written by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into(),
            found: String::from_utf8_lossy(bytes).into(),
        });
    }
    let magic = &bytes[..8];
    if magic != CHECKPOINT_MAGIC {
        let found = String::from_utf8_lossy(magic).into_owned();
        if magic[..6] == CHECKPOINT_MAGIC[..6] {
            return Err(Error::VersionMismatch {
                expected: String::from_utf8_lossy(&CHECKPOINT_MAGIC[6..]).into(),
                found: String::from_utf8_lossy(&magic[6..]).into(),
            });
        }
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into(),
            found,
        });
    }
    let mut buf = &bytes[8..];

    let config = String::from_utf8(read_section(&mut buf, "CONF")?.to_vec())
        .map_err(|_| Error::Data("config section is not UTF-8".into()))?;

    let mut r = Reader { buf: read_section(&mut buf, "MODL")?, section: "MODL" };
    let input_dim = r.u64()?;
    let n_hidden = r.len()?;
    let hidden = (0..n_hidden).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let latent_dim = r.u64()?;
    let spec = MlpSpec { input_dim, hidden, latent_dim };
    let template = VaeModel::zeros(spec.clone()).map_err(|e| Error::Data(format!("model spec: {e}")))?;
    let params = template
        .params()
        .into_iter()
        .map(|p| {
            let data = r.vec()?;
            Tensor::param(p.shape().to_vec(), data).map_err(|e| Error::Data(format!("model params: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let model = VaeModel::from_params(spec, params)?;

    let mut r = Reader { buf: read_section(&mut buf, "PRIO")?, section: "PRIO" };
    let n = r.len()?;
    let mut comps = Vec::with_capacity(n);
    for _ in 0..n {
        let task_id = r.u64()?;
        let log_weight = r.f64()?;
        let pseudo_input = r.vec()?;
        let snapshot = r.gaussian()?;
        comps.push(PriorComponent { pseudo_input, snapshot, log_weight, task_id });
    }
    r.finish()?;
    // stored weights are already normalized; keep them bit-exact
    let prior = MixturePrior::from_normalized(comps)?;

    let mut r = Reader { buf: read_section(&mut buf, "BANK")?, section: "BANK" };
    let n = r.len()?;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let task_id = r.u64()?;
        let pseudo_input = r.vec()?;
        let posterior = r.gaussian()?;
        let s = r.len()?;
        let mut latents = Vec::with_capacity(s);
        let mut decoded = Vec::with_capacity(s);
        for _ in 0..s {
            latents.push(r.vec()?);
            decoded.push(BernoulliVec::new(r.vec()?)?);
        }
        entries.push(BankEntry { task_id, pseudo_input, posterior, latents, decoded });
    }
    r.finish()?;

    let mut r = Reader { buf: read_section(&mut buf, "SEEN")?, section: "SEEN" };
    let n = r.len()?;
    let seen_counts = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;

    let mut r = Reader { buf: read_section(&mut buf, "RNGS")?, section: "RNGS" };
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    r.finish()?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    if !buf.is_empty() {
        return Err(Error::Data("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        config,
        state: ContinualState {
            model,
            prior,
            bank: RegularizerBank { entries },
            seen_counts,
        },
        rng,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(ck))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
