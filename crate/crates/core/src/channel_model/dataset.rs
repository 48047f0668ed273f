//! Binary container for channel realizations and other complex arrays.
//!
//! Layout: the 8-byte magic `RKCHDS01`, a little-endian `u64` header length, a UTF-8 JSON
//! header, then each array's elements in header order as interleaved little-endian `f32`
//! real/imaginary pairs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use super::{generate_channel, stream_rng, ArrayGeometry, ChannelTensor, OfdmGrid, PathBounds, PathGenConfig, PathSet, TensorShape};
use crate::{Error, Result, C64};

pub const MAGIC: &[u8; 8] = b"RKCHDS01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArraySpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub kind: String,
    pub arrays: Vec<ArraySpec>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Named complex arrays with a JSON header.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: DatasetHeader,
    pub data: Vec<Vec<C64>>,
}

impl Container {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value) -> Self {
        Container {
            header: DatasetHeader {
                format_version: FORMAT_VERSION,
                kind: kind.into(),
                arrays: Vec::new(),
                metadata,
            },
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<C64>) -> Result<()> {
        let spec = ArraySpec {
            name: name.into(),
            shape,
        };
        if spec.len() != values.len() {
            return Err(Error::shape("container array", spec.len(), values.len()));
        }
        self.header.arrays.push(spec);
        self.data.push(values);
        Ok(())
    }

    pub fn array(&self, name: &str) -> Option<(&ArraySpec, &[C64])> {
        self.header
            .arrays
            .iter()
            .position(|a| a.name == name)
            .map(|i| (&self.header.arrays[i], self.data[i].as_slice()))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(std::io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::new();
        for arr in &self.data {
            buf.clear();
            buf.reserve(arr.len() * 8);
            for z in arr {
                buf.extend_from_slice(&(z.re as f32).to_le_bytes());
                buf.extend_from_slice(&(z.im as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::parse("magic", e.to_string()))?;
        if &magic != MAGIC {
            return Err(Error::parse("magic", "not a channel dataset container"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|e| Error::parse("header_length", e.to_string()))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(Error::parse("header_length", format!("implausible header length {len}")));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header).map_err(|e| Error::parse("header", e.to_string()))?;
        let de = &mut serde_json::Deserializer::from_slice(&header);
        let header: DatasetHeader = serde_path_to_error::deserialize(de).map_err(|e| Error::parse(e.path().to_string(), e.inner().to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::parse(
                "format_version",
                format!("unsupported version {}, expected {FORMAT_VERSION}", header.format_version),
            ));
        }
        let mut data = Vec::with_capacity(header.arrays.len());
        for spec in &header.arrays {
            let mut bytes = vec![0u8; spec.len() * 8];
            r.read_exact(&mut bytes)
                .map_err(|e| Error::parse(format!("arrays.{}", spec.name), format!("truncated payload: {e}")))?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| {
                    let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                    let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
                    C64::new(re as f64, im as f64)
                })
                .collect();
            data.push(values);
        }
        Ok(Container { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Container::read_from(&mut BufReader::new(f))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetMeta {
    geometry: ArrayGeometry,
    grid: OfdmGrid,
    generation: Option<PathGenConfig>,
    seed: Option<u64>,
    #[serde(default)]
    paths: Option<Vec<PathSet>>,
}

/// Many channel realizations sharing one grid and geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDataset {
    pub geometry: ArrayGeometry,
    pub grid: OfdmGrid,
    pub generation: Option<PathGenConfig>,
    pub seed: Option<u64>,
    pub channels: Vec<ChannelTensor>,
    /// Generating paths, when known; required by the genie baseline.
    pub paths: Option<Vec<PathSet>>,
}

impl ChannelDataset {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn shape(&self) -> TensorShape {
        TensorShape::new(self.grid.n_subcarriers, self.geometry.n_rows(), self.geometry.n_cols())
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = DatasetMeta {
            geometry: self.geometry.clone(),
            grid: self.grid.clone(),
            generation: self.generation.clone(),
            seed: self.seed,
            paths: self.paths.clone(),
        };
        let shape = self.shape();
        let mut values = Vec::with_capacity(self.len() * shape.len());
        for h in &self.channels {
            if h.shape() != shape {
                return Err(Error::shape("dataset channel", shape, h.shape()));
            }
            values.extend_from_slice(h.values());
        }
        let mut c = Container::new("channels", serde_json::to_value(meta).map_err(|e| Error::parse("metadata", e.to_string()))?);
        c.push("channels", vec![self.len(), shape.n_freq, shape.n_rows, shape.n_cols], values)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header.kind != "channels" {
            return Err(Error::parse("kind", format!("expected `channels`, found `{}`", c.header.kind)));
        }
        let meta: DatasetMeta = serde_path_to_error::deserialize(c.header.metadata.clone())
            .map_err(|e| Error::parse(format!("metadata.{}", e.path()), e.inner().to_string()))?;
        meta.geometry.validate()?;
        let (spec, values) = c.array("channels").ok_or_else(|| Error::parse("arrays", "missing `channels` array"))?;
        let shape = TensorShape::new(meta.grid.n_subcarriers, meta.geometry.n_rows(), meta.geometry.n_cols());
        if spec.shape.len() != 4 || spec.shape[1..] != shape.dims() {
            return Err(Error::shape("dataset array", format!("[count, {}, {}, {}]", shape.n_freq, shape.n_rows, shape.n_cols), format!("{:?}", spec.shape)));
        }
        let channels = values
            .chunks_exact(shape.len().max(1))
            .take(spec.shape[0])
            .map(|chunk| ChannelTensor::from_values(shape, chunk.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        if let Some(p) = &meta.paths {
            if p.len() != channels.len() {
                return Err(Error::shape("dataset paths", channels.len(), p.len()));
            }
        }
        Ok(ChannelDataset {
            geometry: meta.geometry,
            grid: meta.grid,
            generation: meta.generation,
            seed: meta.seed,
            channels,
            paths: meta.paths,
        })
    }

    /// `count` channels from `cfg`, channel `i` drawn from stream `i` of `seed`.
    pub fn generate(geometry: &ArrayGeometry, grid: &OfdmGrid, cfg: &PathGenConfig, count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("at least one channel must be requested"));
        }
        geometry.validate()?;
        cfg.validate()?;
        let bounds = PathBounds::nyquist(grid, geometry);
        let drawn: Vec<(PathSet, ChannelTensor)> = (0..count as u64)
            .into_par_iter()
            .map(|i| generate_channel(&mut stream_rng(seed, i), cfg, &bounds, grid, geometry))
            .collect::<Result<_>>()?;
        let (paths, channels) = drawn.into_iter().unzip();
        Ok(ChannelDataset {
            geometry: geometry.clone(),
            grid: grid.clone(),
            generation: Some(cfg.clone()),
            seed: Some(seed),
            channels,
            paths: Some(paths),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ChannelDataset::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::{generate_channel, ClusterSpreads, PathBounds};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize) -> ChannelDataset {
        let grid = OfdmGrid::new(16, 30e3, 3.5e9, 4).unwrap();
        let geometry = ArrayGeometry::uniform(2, 3, 0.0857, 0.0428).unwrap();
        let generation = PathGenConfig {
            cluster_count: 2,
            paths_per_cluster: 2,
            spreads: ClusterSpreads {
                delay_s: 1e-7,
                spatial_row: 0.5,
                spatial_col: 0.5,
            },
            center_delay_range: [0.0, 1.0],
            power_decay_s: 1e-6,
        };
        let bounds = PathBounds::nyquist(&grid, &geometry);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (paths, channels): (Vec<_>, Vec<_>) = (0..n)
            .map(|_| generate_channel(&mut rng, &generation, &bounds, &grid, &geometry).unwrap())
            .unzip();
        ChannelDataset {
            geometry,
            grid,
            generation: Some(generation),
            seed: Some(3),
            channels,
            paths: Some(paths),
        }
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let ds = dataset(3);
        let mut bytes = Vec::new();
        ds.to_container().unwrap().write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = ChannelDataset::from_container(&Container::read_from(&mut bytes.as_slice()).unwrap()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.paths, ds.paths);
        for (a, b) in ds.channels.iter().zip(&back.channels) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).norm() <= 1e-6 * x.norm().max(1.0));
            }
        }
    }

    #[test]
    fn payload_is_interleaved_le_f32() {
        let mut c = Container::new("test", serde_json::Value::Null);
        c.push("a", vec![2], vec![C64::new(1.5, -2.0), C64::new(0.25, 8.0)]).unwrap();
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        let payload = &bytes[bytes.len() - 16..];
        assert_eq!(&payload[..4], &1.5f32.to_le_bytes());
        assert_eq!(&payload[4..8], &(-2.0f32).to_le_bytes());
        assert_eq!(&payload[12..16], &8.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let ds = dataset(1);
        let mut bytes = Vec::new();
        ds.to_container().unwrap().write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::read_from(&mut bad.as_slice()), Err(Error::Parse { .. })));
        let short = &bytes[..bytes.len() - 4];
        match Container::read_from(&mut &short[..]) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "arrays.channels"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn generation_is_reproducible_and_normalized() {
        let grid = OfdmGrid::new(32, 30e3, 3.5e9, 4).unwrap();
        let lam = grid.wavelength_m();
        let geom = ArrayGeometry::uniform(2, 2, lam, lam / 2.0).unwrap();
        let cfg = PathGenConfig::compact(&PathBounds::nyquist(&grid, &geom));
        let a = ChannelDataset::generate(&geom, &grid, &cfg, 6, 9).unwrap();
        let b = ChannelDataset::generate(&geom, &grid, &cfg, 6, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.channels[0], a.channels[1]);
        for h in &a.channels {
            assert!((h.mean_square() - 1.0).abs() < 1e-9);
        }
        assert!(ChannelDataset::generate(&geom, &grid, &cfg, 0, 9).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = dataset(2);
        ds.save(&path).unwrap();
        let back = ChannelDataset::load(&path).unwrap();
        assert_eq!(back.grid, ds.grid);
        assert_eq!(back.geometry, ds.geometry);
        assert!(matches!(ChannelDataset::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
