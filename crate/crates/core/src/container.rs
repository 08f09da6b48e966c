//! Single-file checkpoint container.
//!
//! Layout, in order:
//!
//! 1. 8 bytes: manifest length as little-endian `u64`;
//! 2. manifest: UTF-8 JSON array of tensor descriptors, sorted strictly
//!    ascending by name;
//! 3. payload: raw little-endian IEEE-754 `f32` values, one contiguous run
//!    per tensor at the offset its descriptor declares.
//!
//! Containers are immutable once written. Readers hold the manifest in memory
//! and seek into the payload on demand, so streaming a merge over M
//! containers keeps at most one parameter block per container in memory.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorMap};
use crate::{Tensor32, TensorMap32};

/// Tensor name prefixes reserved for auxiliary statistics stored in the same
/// container format: diagonal Fisher values, per-layer Gram matrices, and
/// binary trim masks (encoded as 0.0 / 1.0).
pub const FISHER_PREFIX: &str = "fisher/";
pub const GRAM_PREFIX: &str = "gram/";
pub const TRIM_PREFIX: &str = "trim/";

const BYTES_PER_ELEM: u64 = 4;

/// One manifest entry. Field order matters: it is the serialized key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub dtype: String,
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn byte_len(&self) -> Result<u64> {
        let numel = self
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| {
                Error::MalformedContainer(format!("tensor {}: shape overflows", self.name))
            })?;
        numel.checked_mul(BYTES_PER_ELEM).ok_or_else(|| {
            Error::MalformedContainer(format!("tensor {}: byte length overflows", self.name))
        })
    }
}

fn validate_manifest(manifest: &[TensorMeta], payload_len: u64) -> Result<()> {
    if manifest.is_empty() {
        return Err(Error::EmptyContainer);
    }
    let mut end_max = 0u64;
    for (i, meta) in manifest.iter().enumerate() {
        if meta.dtype != "f32" {
            return Err(Error::UnsupportedDtype {
                name: meta.name.clone(),
                dtype: meta.dtype.clone(),
            });
        }
        if meta.shape.is_empty() || meta.shape.iter().any(|&d| d == 0) {
            return Err(Error::MalformedContainer(format!(
                "tensor {}: invalid shape {:?}",
                meta.name, meta.shape
            )));
        }
        if i > 0 {
            let prev = &manifest[i - 1].name;
            if *prev == meta.name {
                return Err(Error::DuplicateName(meta.name.clone()));
            }
            if *prev > meta.name {
                return Err(Error::MalformedContainer(format!(
                    "tensor names out of order: {} after {}",
                    meta.name, prev
                )));
            }
        }
        let end = meta.offset.checked_add(meta.byte_len()?).ok_or_else(|| {
            Error::MalformedContainer(format!("tensor {}: offset overflows", meta.name))
        })?;
        if end > payload_len {
            return Err(Error::PayloadLengthMismatch(format!(
                "tensor {} needs bytes [{}, {}) but payload holds {}",
                meta.name, meta.offset, end, payload_len
            )));
        }
        end_max = end_max.max(end);
    }
    if end_max < payload_len {
        return Err(Error::PayloadLengthMismatch(format!(
            "payload holds {payload_len} bytes but manifest accounts for {end_max}"
        )));
    }
    Ok(())
}

fn manifest_for(map: &TensorMap32) -> Vec<TensorMeta> {
    let mut manifest = Vec::with_capacity(map.len());
    let mut offset = 0u64;
    for (name, tensor) in map.iter() {
        manifest.push(TensorMeta {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
            dtype: "f32".into(),
        });
        offset += tensor.numel() as u64 * BYTES_PER_ELEM;
    }
    manifest
}

fn write_values(out: &mut impl Write, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Writes a checkpoint container. With `strict_finite` set, any NaN or
/// infinity in the data is an error; otherwise such values are stored as-is.
pub fn write_container(map: &TensorMap32, path: &Path, strict_finite: bool) -> Result<()> {
    if map.is_empty() {
        return Err(Error::EmptyContainer);
    }
    if strict_finite {
        for (name, tensor) in map.iter() {
            if let Some(i) = tensor.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{name} at flat index {i}")));
            }
        }
    }
    let manifest = manifest_for(map);
    let manifest_json = serde_json::to_vec(&manifest)?;
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    out.write_all(&manifest_json)?;
    for (_, tensor) in map.iter() {
        write_values(&mut out, tensor.data())?;
    }
    out.flush()?;
    Ok(())
}

/// Incremental container writer for streaming merges: the manifest (and thus
/// every offset) is fixed up front, then blocks are appended in name order.
pub struct ContainerWriter {
    out: BufWriter<File>,
    manifest: Vec<TensorMeta>,
    next: usize,
    strict_finite: bool,
}

impl ContainerWriter {
    /// Starts a container holding exactly the tensors described by
    /// `shapes` (name, shape), which must already be in ascending name order.
    pub fn begin(
        path: &Path,
        shapes: &[(String, Vec<usize>)],
        strict_finite: bool,
    ) -> Result<Self> {
        let mut manifest = Vec::with_capacity(shapes.len());
        let mut offset = 0u64;
        for (name, shape) in shapes {
            let meta = TensorMeta {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                dtype: "f32".into(),
            };
            offset = offset
                .checked_add(meta.byte_len()?)
                .ok_or_else(|| Error::MalformedContainer("payload overflows".into()))?;
            manifest.push(meta);
        }
        validate_manifest(&manifest, offset)?;
        let manifest_json = serde_json::to_vec(&manifest)?;
        let file = File::create(path)?;
        let mut out = BufWriter::new(file);
        out.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
        out.write_all(&manifest_json)?;
        Ok(ContainerWriter {
            out,
            manifest,
            next: 0,
            strict_finite,
        })
    }

    /// Appends the next tensor; name and element count must match the
    /// manifest entry fixed at `begin` time.
    pub fn append(&mut self, name: &str, tensor: &Tensor32) -> Result<()> {
        let meta = self.manifest.get(self.next).ok_or_else(|| {
            Error::MalformedContainer(format!("append of {name} past end of manifest"))
        })?;
        if meta.name != name {
            return Err(Error::MalformedContainer(format!(
                "append out of order: expected {}, got {name}",
                meta.name
            )));
        }
        if meta.shape != tensor.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: manifest says {:?}, block has {:?}",
                meta.shape,
                tensor.shape()
            )));
        }
        if self.strict_finite {
            if let Some(i) = tensor.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{name} at flat index {i}")));
            }
        }
        write_values(&mut self.out, tensor.data())?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.next != self.manifest.len() {
            return Err(Error::MalformedContainer(format!(
                "container closed after {} of {} tensors",
                self.next,
                self.manifest.len()
            )));
        }
        self.out.flush()?;
        Ok(())
    }
}

/// Random-access reader over one container.
#[derive(Debug)]
pub struct ContainerReader {
    file: File,
    path: PathBuf,
    manifest: Vec<TensorMeta>,
    payload_base: u64,
}

impl ContainerReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let file_len = file.metadata()?.len();
        if file_len < 8 {
            return Err(Error::MalformedContainer(format!(
                "{}: too short for a manifest header",
                path.display()
            )));
        }
        let mut header = [0u8; 8];
        file.read_exact(&mut header)?;
        let manifest_len = u64::from_le_bytes(header);
        if manifest_len > file_len - 8 {
            return Err(Error::MalformedContainer(format!(
                "{}: manifest length {} exceeds file size",
                path.display(),
                manifest_len
            )));
        }
        let mut manifest_bytes = vec![0u8; manifest_len as usize];
        file.read_exact(&mut manifest_bytes)?;
        let manifest: Vec<TensorMeta> = serde_json::from_slice(&manifest_bytes)?;
        let payload_base = 8 + manifest_len;
        validate_manifest(&manifest, file_len - payload_base)?;
        Ok(ContainerReader {
            file,
            path: path.to_path_buf(),
            manifest,
            payload_base,
        })
    }

    pub fn manifest(&self) -> &[TensorMeta] {
        &self.manifest
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    /// Reads the tensor at manifest position `index`.
    pub fn read_at(&mut self, index: usize) -> Result<Tensor32> {
        let meta = self
            .manifest
            .get(index)
            .ok_or_else(|| {
                Error::MalformedContainer(format!("tensor index {index} out of range"))
            })?
            .clone();
        self.file
            .seek(SeekFrom::Start(self.payload_base + meta.offset))?;
        let mut bytes = vec![0u8; meta.byte_len()? as usize];
        self.file.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(meta.shape.clone(), data)
    }

    /// Reads a tensor by name. Manifest names are sorted, so lookup is a
    /// binary search.
    pub fn read_by_name(&mut self, name: &str) -> Result<Tensor32> {
        let index = self
            .manifest
            .binary_search_by(|meta| meta.name.as_str().cmp(name))
            .map_err(|_| {
                Error::ManifestMismatch(format!(
                    "tensor {name} not found in {}",
                    self.path.display()
                ))
            })?;
        self.read_at(index)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.manifest
            .binary_search_by(|meta| meta.name.as_str().cmp(name))
            .is_ok()
    }

    /// Consumes the reader into a block-at-a-time cursor.
    pub fn into_cursor(self) -> BlockCursor {
        BlockCursor {
            reader: self,
            position: 0,
        }
    }
}

/// Yields (name, tensor) pairs in manifest (lexicographic) order.
pub struct BlockCursor {
    reader: ContainerReader,
    position: usize,
}

impl Iterator for BlockCursor {
    type Item = Result<(String, Tensor32)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.position >= self.reader.len() {
            return None;
        }
        let name = self.reader.manifest[self.position].name.clone();
        let tensor = self.reader.read_at(self.position);
        self.position += 1;
        Some(tensor.map(|t| (name, t)))
    }
}

/// Reads a whole container into memory.
pub fn read_container(path: &Path) -> Result<TensorMap32> {
    let reader = ContainerReader::open(path)?;
    let mut map = TensorMap::new();
    for entry in reader.into_cursor() {
        let (name, tensor) = entry?;
        map.insert(name, tensor);
    }
    Ok(map)
}

/// Checks that every reader sees the same tensor names and shapes, naming
/// the first offending tensor otherwise.
pub fn check_aligned_manifests(readers: &[ContainerReader]) -> Result<()> {
    let Some((first, rest)) = readers.split_first() else {
        return Ok(());
    };
    for other in rest {
        let mut a = first.manifest().iter();
        let mut b = other.manifest().iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => break,
                (Some(ma), None) => {
                    return Err(Error::ManifestMismatch(format!(
                        "tensor {} missing from {}",
                        ma.name,
                        other.path().display()
                    )));
                }
                (None, Some(mb)) => {
                    return Err(Error::ManifestMismatch(format!(
                        "unexpected tensor {} in {}",
                        mb.name,
                        other.path().display()
                    )));
                }
                (Some(ma), Some(mb)) => {
                    if ma.name != mb.name {
                        let missing = if ma.name < mb.name { &ma.name } else { &mb.name };
                        return Err(Error::ManifestMismatch(format!(
                            "tensor {missing} present in only one of {} and {}",
                            first.path().display(),
                            other.path().display()
                        )));
                    }
                    if ma.shape != mb.shape {
                        return Err(Error::ManifestMismatch(format!(
                            "tensor {}: shape {:?} in {} vs {:?} in {}",
                            ma.name,
                            ma.shape,
                            first.path().display(),
                            mb.shape,
                            other.path().display()
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Streams aligned parameter blocks from several containers at once. Peak
/// memory is one block per container.
#[derive(Debug)]
pub struct BlockStream {
    readers: Vec<ContainerReader>,
    position: usize,
}

impl BlockStream {
    pub fn open(paths: &[PathBuf]) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::InvalidRecipe(
                "at least one container is required".into(),
            ));
        }
        let readers: Vec<ContainerReader> = paths
            .iter()
            .map(|p| ContainerReader::open(p))
            .collect::<Result<_>>()?;
        check_aligned_manifests(&readers)?;
        Ok(BlockStream {
            readers,
            position: 0,
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.readers[0]
            .manifest()
            .iter()
            .map(|m| m.name.clone())
            .collect()
    }
}

impl Iterator for BlockStream {
    type Item = Result<(String, Vec<Tensor32>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.position >= self.readers[0].len() {
            return None;
        }
        let name = self.readers[0].manifest()[self.position].name.clone();
        let mut blocks = Vec::with_capacity(self.readers.len());
        for reader in &mut self.readers {
            match reader.read_at(self.position) {
                Ok(t) => blocks.push(t),
                Err(e) => return Some(Err(e)),
            }
        }
        self.position += 1;
        Some(Ok((name, blocks)))
    }
}
