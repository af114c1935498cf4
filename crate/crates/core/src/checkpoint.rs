//! Versioned checkpoint files.
//!
//! Layout: a magic line `CLOMCKPT <version>`, a sorted `key=value` text
//! manifest terminated by `end`, then named binary blocks. Each block is
//! `u32` name length, UTF-8 name, `u64` element count and that many
//! little-endian `f32` values. The manifest records every block's shape.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::calibration::CalibrationParams;
use crate::config::ExperimentConfig;
use crate::data::{InputKind, MemoryBuffer, MemoryClass};
use crate::error::{Error, Result};
use crate::experiment::ExperimentState;
use crate::masknet::AccumulatedMask;
use crate::metrics::AccuracyMatrix;
use crate::model::{Architecture, Linear, MaskedLayer, ModelState, ProjectionHead, TaskClassifier, TaskHeads};
use crate::tensor::Tensor;

pub const MAGIC: &str = "CLOMCKPT";
pub const FORMAT_VERSION: u32 = 1;

struct Writer {
    manifest: BTreeMap<String, String>,
    blocks: Vec<(String, Vec<f32>)>,
}

impl Writer {
    fn meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.manifest.insert(key.into(), value.to_string());
    }

    fn block(&mut self, name: String, shape: &[usize], data: &[f32]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        self.meta(format!("block.{name}"), dims.join("x"));
        self.blocks.push((name, data.to_vec()));
    }

    fn tensor(&mut self, name: String, t: &Tensor<f32>) {
        self.block(name, t.shape(), t.data());
    }

    fn linear(&mut self, prefix: &str, l: &Linear) {
        self.tensor(format!("{prefix}.weight"), &l.weight);
        self.tensor(format!("{prefix}.bias"), &l.bias);
    }

    fn matrix(&mut self, name: &str, m: &AccuracyMatrix) {
        self.meta(format!("accuracy.{name}.rows"), m.len());
        for (k, row) in m.rows().iter().enumerate() {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            self.meta(format!("accuracy.{name}.{k:03}"), cells.join(","));
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Serializes the state to bytes.
pub fn to_bytes(state: &ExperimentState) -> Result<Vec<u8>> {
    let mut w = Writer { manifest: BTreeMap::new(), blocks: Vec::new() };
    let config = serde_json::to_string(&state.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.meta("config", config);
    let m = &state.model;
    let arch = &m.arch;
    w.meta("arch.kind", serde_json::to_string(&arch.kind).map_err(|e| Error::Checkpoint(e.to_string()))?);
    w.meta("arch.hidden_width", arch.hidden_width);
    w.meta("arch.depth", arch.depth);
    w.meta("arch.proj_dim", arch.proj_dim);
    w.meta("arch.num_rotations", arch.num_rotations);
    w.meta("tasks", m.num_tasks());
    w.meta("rng.seed", state.config.seed);
    w.meta("rng.next_task", state.next_task);
    for (l, layer) in m.layers.iter().enumerate() {
        w.linear(&format!("trunk.{l}"), &layer.linear);
        for (t, e) in layer.embeddings.iter().enumerate() {
            w.tensor(format!("trunk.{l}.embedding.{t:03}"), e);
        }
        let acc = &m.accumulated.layers[l];
        w.block(format!("mask.accumulated.{l}"), &[acc.len()], acc);
    }
    for (t, head) in m.tasks.iter().enumerate() {
        w.meta(format!("task.{t:03}.classes"), join(&head.classes));
        w.linear(&format!("task.{t:03}.projection.hidden"), &head.projection.hidden);
        w.linear(&format!("task.{t:03}.projection.out"), &head.projection.out);
        w.linear(&format!("task.{t:03}.classifier"), &head.classifier.linear);
    }
    let mem = &state.memory;
    w.meta("memory.dim", mem.dim());
    w.meta("memory.per_class", mem.per_class());
    w.meta("memory.classes", mem.entries().len());
    for (&(t, c), entry) in mem.entries() {
        w.meta(format!("memory.{t:03}.{c:03}.global_class"), entry.global_class);
        let rows = entry.samples.len() / mem.dim().max(1);
        w.block(format!("memory.{t:03}.{c:03}"), &[rows, mem.dim()], &entry.samples);
    }
    match &state.calibration {
        Some(c) => {
            w.meta("calibration", "fitted");
            w.block("calibration.sigma".into(), &[c.sigma.len()], &c.sigma);
            w.block("calibration.mu".into(), &[c.mu.len()], &c.mu);
        }
        None => w.meta("calibration", "none"),
    }
    w.matrix("til", &state.til);
    w.matrix("cil", &state.cil);
    w.matrix("cil_calibrated", &state.cil_calibrated);

    let mut out = format!("{MAGIC} {FORMAT_VERSION}\n").into_bytes();
    for (k, v) in &w.manifest {
        if v.contains('\n') || k.contains('=') {
            return Err(Error::Checkpoint(format!("manifest entry `{k}` is not single-line")));
        }
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    out.extend_from_slice(b"end\n");
    for (name, data) in &w.blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Atomically writes the state to `path` (temporary file, then rename).
pub fn save(state: &ExperimentState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ExperimentState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

struct Reader {
    manifest: BTreeMap<String, String>,
    blocks: BTreeMap<String, Vec<f32>>,
}

impl Reader {
    fn get(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("manifest is missing `{key}`")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("manifest entry `{key}` is not a number")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad list entry in `{key}`"))))
            .collect()
    }

    fn tensor(&mut self, name: &str) -> Result<Tensor<f32>> {
        let data = self
            .blocks
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing block `{name}`")))?;
        let shape: Vec<usize> = self
            .get(&format!("block.{name}"))?
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape for block `{name}`"))))
            .collect::<Result<_>>()?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Checkpoint(format!(
                "block `{name}` holds {} values but the manifest declares shape {shape:?}",
                data.len()
            )));
        }
        Tensor::new(shape, data)
    }

    fn linear(&mut self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            weight: self.tensor(&format!("{prefix}.weight"))?,
            bias: self.tensor(&format!("{prefix}.bias"))?,
        })
    }

    fn matrix(&self, name: &str) -> Result<AccuracyMatrix> {
        let rows: usize = self.num(&format!("accuracy.{name}.rows"))?;
        let rows = (0..rows).map(|k| self.list(&format!("accuracy.{name}.{k:03}"))).collect::<Result<_>>()?;
        AccuracyMatrix::from_rows(rows).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn parse_header(bytes: &[u8]) -> Result<(BTreeMap<String, String>, usize)> {
    if bytes.is_empty() {
        return Err(Error::Parse { offset: 0, message: "empty checkpoint".into() });
    }
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<String> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(Error::Parse { offset: start, message: "unterminated manifest line".into() })?;
        *pos = start + end + 1;
        String::from_utf8(bytes[start..start + end].to_vec())
            .map_err(|_| Error::Parse { offset: start, message: "manifest is not UTF-8".into() })
    };
    let first = next_line(&mut pos)?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or(Error::Parse { offset: 0, message: format!("not a checkpoint (expected `{MAGIC} <version>`)") })?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let mut manifest = BTreeMap::new();
    loop {
        let offset = pos;
        let line = next_line(&mut pos)?;
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or(Error::Parse { offset, message: format!("manifest line without `=`: {line}") })?;
        manifest.insert(k.to_string(), v.to_string());
    }
    Ok((manifest, pos))
}

fn parse_blocks(bytes: &[u8], mut pos: usize) -> Result<BTreeMap<String, Vec<f32>>> {
    let mut blocks = BTreeMap::new();
    while pos < bytes.len() {
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Parse {
                offset: *pos,
                message: format!("truncated {what}"),
            })?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        let len = u32::from_le_bytes(take(&mut pos, 4, "block name length")?.try_into().expect("4 bytes")) as usize;
        let name = String::from_utf8(take(&mut pos, len, "block name")?.to_vec())
            .map_err(|_| Error::Parse { offset: pos, message: "block name is not UTF-8".into() })?;
        let count = u64::from_le_bytes(take(&mut pos, 8, &format!("length of block `{name}`"))?.try_into().expect("8 bytes"));
        let n_bytes = usize::try_from(count).ok().and_then(|c| c.checked_mul(4));
        let raw = match n_bytes {
            Some(n) => take(&mut pos, n, &format!("data of block `{name}`"))?,
            None => return Err(Error::Parse { offset: pos, message: format!("invalid length of block `{name}`") }),
        };
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if blocks.insert(name.clone(), data).is_some() {
            return Err(Error::Checkpoint(format!("duplicate block `{name}`")));
        }
    }
    Ok(blocks)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ExperimentState> {
    let (manifest, pos) = parse_header(bytes)?;
    let blocks = parse_blocks(bytes, pos)?;
    let mut r = Reader { manifest, blocks };

    let config: ExperimentConfig =
        serde_json::from_str(r.get("config")?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let kind: InputKind =
        serde_json::from_str(r.get("arch.kind")?).map_err(|e| Error::Checkpoint(format!("arch.kind: {e}")))?;
    let arch = Architecture {
        kind,
        hidden_width: r.num("arch.hidden_width")?,
        depth: r.num("arch.depth")?,
        proj_dim: r.num("arch.proj_dim")?,
        num_rotations: r.num("arch.num_rotations")?,
    };
    let n_tasks: usize = r.num("tasks")?;
    let mut layers = Vec::with_capacity(arch.depth);
    let mut acc = Vec::with_capacity(arch.depth);
    for l in 0..arch.depth {
        let linear = r.linear(&format!("trunk.{l}"))?;
        let embeddings =
            (0..n_tasks).map(|t| r.tensor(&format!("trunk.{l}.embedding.{t:03}"))).collect::<Result<_>>()?;
        layers.push(MaskedLayer { linear, embeddings });
        acc.push(r.tensor(&format!("mask.accumulated.{l}"))?.into_data());
    }
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let classes: Vec<usize> = r.list(&format!("task.{t:03}.classes"))?;
        let projection = ProjectionHead {
            hidden: r.linear(&format!("task.{t:03}.projection.hidden"))?,
            out: r.linear(&format!("task.{t:03}.projection.out"))?,
        };
        let linear = r.linear(&format!("task.{t:03}.classifier"))?;
        if linear.output_dim() != classes.len() * arch.num_rotations {
            return Err(Error::Checkpoint(format!("classifier of task {} has the wrong width", t + 1)));
        }
        let classifier = TaskClassifier { linear, num_classes: classes.len(), num_rotations: arch.num_rotations };
        tasks.push(TaskHeads { classes, projection, classifier });
    }
    let model = ModelState { arch, layers, tasks, accumulated: AccumulatedMask { layers: acc } };

    let dim: usize = r.num("memory.dim")?;
    let per_class: usize = r.num("memory.per_class")?;
    let keys: Vec<(usize, usize)> = r
        .manifest
        .keys()
        .filter_map(|k| {
            let rest = k.strip_prefix("memory.")?.strip_suffix(".global_class")?;
            let (t, c) = rest.split_once('.')?;
            Some((t.parse().ok()?, c.parse().ok()?))
        })
        .collect();
    if keys.len() != r.num::<usize>("memory.classes")? {
        return Err(Error::Checkpoint("memory class count does not match entries".into()));
    }
    let mut entries = BTreeMap::new();
    for (t, c) in keys {
        let global_class = r.num(&format!("memory.{t:03}.{c:03}.global_class"))?;
        let samples = r.tensor(&format!("memory.{t:03}.{c:03}"))?.into_data();
        entries.insert((t, c), MemoryClass { global_class, samples });
    }
    let memory = MemoryBuffer::from_parts(dim, per_class, entries);

    let calibration = match r.get("calibration")? {
        "fitted" => Some(CalibrationParams {
            sigma: r.tensor("calibration.sigma")?.into_data(),
            mu: r.tensor("calibration.mu")?.into_data(),
        }),
        "none" => None,
        other => return Err(Error::Checkpoint(format!("unknown calibration state `{other}`"))),
    };
    let state = ExperimentState {
        til: r.matrix("til")?,
        cil: r.matrix("cil")?,
        cil_calibrated: r.matrix("cil_calibrated")?,
        next_task: r.num("rng.next_task")?,
        config,
        model,
        memory,
        calibration,
    };
    if r.num::<u64>("rng.seed")? != state.config.seed {
        return Err(Error::Checkpoint("rng.seed disagrees with the stored configuration".into()));
    }
    if let Some(name) = r.blocks.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected block `{name}`")));
    }
    Ok(state)
}
