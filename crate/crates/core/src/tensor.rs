//! Portable tensor files.
//!
//! Layout:
//!
//! ```text
//! KLTENSOR1 <header byte length>\n
//! <header JSON>\n
//! <payload: f32 little-endian, channel-major (channel, dim0, dim1)>
//! ```
//!
//! Grids use `dims = [rows, cols]`. The adjacency tensor uses
//! `dims = [keypoints, 1 + K]`: slot 0 holds the keypoint's map position and
//! slots `1..=K` hold the offsets to every keypoint of its lane.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Grid, GridSpec};
use crate::encoder::{AdjacencyTarget, Targets};
use crate::error::{Error, Result};

const MAGIC: &str = "KLTENSOR1";
pub const EXTENSION: &str = "klt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub dims: Vec<usize>,
    pub channels: usize,
    pub stride: usize,
    pub width_in: usize,
    pub height_in: usize,
    pub units: String,
    pub dtype: String,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl TensorHeader {
    pub fn len(&self) -> usize {
        self.channels * self.dims.iter().product::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.width_in, self.height_in, self.stride)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub header: TensorHeader,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn from_grid(name: &str, units: &str, grid: &Grid) -> Self {
        let spec = grid.spec();
        Self {
            header: TensorHeader {
                name: name.to_string(),
                dims: vec![spec.height_out, spec.width_out],
                channels: grid.channels(),
                stride: spec.stride,
                width_in: spec.width_in,
                height_in: spec.height_in,
                units: units.to_string(),
                dtype: "f32le".into(),
                meta: BTreeMap::new(),
            },
            data: grid.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.header.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn to_grid(&self) -> Result<Grid> {
        let spec = self.header.grid_spec()?;
        if self.header.dims != [spec.height_out, spec.width_out] {
            return Err(Error::Format(format!(
                "{}: dims {:?} do not match a {}x{} grid",
                self.header.name, self.header.dims, spec.height_out, spec.width_out
            )));
        }
        Grid::from_vec(
            spec,
            self.header.channels,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(header.len() + 32 + 4 * self.data.len());
        out.extend_from_slice(format!("{MAGIC} {}\n", header.len()).as_bytes());
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn read_from(reader: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let len: usize = first
            .strip_suffix('\n')
            .and_then(|l| l.strip_prefix(MAGIC))
            .and_then(|l| l.strip_prefix(' '))
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| Error::Format("missing tensor magic line".into()))?;
        let mut header = vec![0u8; len + 1];
        reader.read_exact(&mut header)?;
        if header.pop() != Some(b'\n') {
            return Err(Error::Format("header is not newline terminated".into()));
        }
        let header: TensorHeader = serde_json::from_slice(&header)?;
        if header.dtype != "f32le" {
            return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
        }
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        if payload.len() != 4 * header.len() {
            return Err(Error::Format(format!(
                "{}: payload has {} bytes, header implies {}",
                header.name,
                payload.len(),
                4 * header.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { header, data })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Adjacency ground truth as a `[keypoints, 1 + K]` two-channel tensor.
pub fn adjacency_tensor(spec: &GridSpec, adjacency: &[AdjacencyTarget], k: usize) -> Result<TensorFile> {
    let p = adjacency.len();
    let slots = k + 1;
    let mut data = vec![0f32; 2 * p * slots];
    for (i, a) in adjacency.iter().enumerate() {
        if a.offsets.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "keypoint {i} has {} adjacency offsets, expected {k}",
                a.offsets.len()
            )));
        }
        let vectors = std::iter::once(a.anchor).chain(a.offsets.iter().copied());
        for (s, v) in vectors.enumerate() {
            for c in 0..2 {
                data[(c * p + i) * slots + s] = v[c] as f32;
            }
        }
    }
    Ok(TensorFile {
        header: TensorHeader {
            name: "adjacency".into(),
            dims: vec![p, slots],
            channels: 2,
            stride: spec.stride,
            width_in: spec.width_in,
            height_in: spec.height_in,
            units: "map_cells".into(),
            dtype: "f32le".into(),
            meta: BTreeMap::from([(
                "layout".to_string(),
                serde_json::Value::from("slot 0 = keypoint position, slots 1..=K = offsets to lane keypoints"),
            )]),
        },
        data,
    })
}

/// Anchor with its offset set.
pub type Adjacency = ([f64; 2], Vec<[f64; 2]>);

/// Anchors and offset sets back from an adjacency tensor.
pub fn read_adjacency(t: &TensorFile) -> Result<Vec<Adjacency>> {
    let [p, slots] = t.header.dims[..] else {
        return Err(Error::Format("adjacency tensor needs two dims".into()));
    };
    if t.header.channels != 2 || slots < 1 {
        return Err(Error::Format("adjacency tensor needs two channels and a slot".into()));
    }
    let at = |c: usize, i: usize, s: usize| t.data[(c * p + i) * slots + s] as f64;
    Ok((0..p)
        .map(|i| {
            let anchor = [at(0, i, 0), at(1, i, 0)];
            let offsets = (1..slots).map(|s| [at(0, i, s), at(1, i, s)]).collect();
            (anchor, offsets)
        })
        .collect())
}

pub const TARGET_FILES: [&str; 5] = ["confidence", "quant", "offsets", "mask", "adjacency"];

pub fn file_name(name: &str) -> String {
    format!("{name}.{EXTENSION}")
}

/// Writes the five target tensors into `dir`.
pub fn write_targets(dir: &Path, t: &Targets, sigma: f64, k: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let files = [
        TensorFile::from_grid("confidence", "probability", &t.confidence).with_meta("sigma_cells", sigma),
        TensorFile::from_grid("quant", "map_cells", &t.quant),
        TensorFile::from_grid("offsets", "map_cells", &t.offsets),
        TensorFile::from_grid("mask", "indicator", &t.mask),
        adjacency_tensor(&t.spec, &t.adjacency, k)?,
    ];
    for f in files {
        f.write(&dir.join(file_name(&f.header.name)))?;
    }
    Ok(())
}

/// The three maps the decoder needs, checked for a common grid.
pub fn read_decoder_inputs(dir: &Path) -> Result<(Grid, Grid, Grid)> {
    let load = |name: &str, channels: usize| -> Result<Grid> {
        let t = TensorFile::read(&dir.join(file_name(name)))?;
        let g = t.to_grid()?;
        if g.channels() != channels {
            return Err(Error::Format(format!(
                "{name} must have {channels} channel(s), has {}",
                g.channels()
            )));
        }
        Ok(g)
    };
    let conf = load("confidence", 1)?;
    let quant = load("quant", 2)?;
    let offsets = load("offsets", 2)?;
    if conf.spec() != quant.spec() || conf.spec() != offsets.spec() {
        return Err(Error::ShapeMismatch("tensor files disagree on the grid spec".into()));
    }
    Ok((conf, quant, offsets))
}
