use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::backend::{BackendError, SegmentOutput, SegmentationBackend};
use crate::membank::{AttendedEntry, FeatureMap};
use crate::preproc::ThreeChannelImage;
use crate::profiler::StageClock;
use crate::volume::Grid2;

/// Environment variable naming the embedding cache directory.
pub const CACHE_ENV: &str = "VOLPROP_CACHE";

/// Wraps a backend and stores image embeddings on disk, keyed by a hash of
/// the backend name, its resolution and the encoder input.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
}

impl<B: SegmentationBackend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn key(&self, image: &ThreeChannelImage) -> String {
        let mut h = Sha256::new();
        h.update(self.inner.name().as_bytes());
        h.update([0]);
        h.update((self.inner.input_resolution().unwrap_or(0) as u64).to_le_bytes());
        h.update((image.width as u64).to_le_bytes());
        h.update((image.height as u64).to_le_bytes());
        for v in &image.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn read(path: &Path, frame: (usize, usize)) -> std::io::Result<FeatureMap> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let mut data = vec![0.0f32; shape.iter().product()];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        if r.read(&mut [0u8])? != 0 {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "trailing bytes"));
        }
        Ok(FeatureMap::new(shape, data, frame))
    }

    fn write(&self, path: &Path, f: &FeatureMap) -> std::io::Result<()> {
        let tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        {
            let mut w = std::io::BufWriter::new(tmp.as_file());
            w.write_u32::<LittleEndian>(f.shape.len() as u32)?;
            for &d in &f.shape {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in f.data.iter() {
                w.write_f32::<LittleEndian>(v)?;
            }
            w.flush()?;
        }
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }
}

impl<B: SegmentationBackend> SegmentationBackend for CachedBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn slot_count(&self) -> usize {
        self.inner.slot_count()
    }

    fn input_resolution(&self) -> Option<usize> {
        self.inner.input_resolution()
    }

    fn encode_slice(&self, image: &ThreeChannelImage) -> Result<FeatureMap, BackendError> {
        let path = self.dir.join(format!("{}.emb", self.key(image)));
        let frame = (image.width, image.height);
        if let Ok(f) = Self::read(&path, frame) {
            return Ok(f);
        }
        let f = self.inner.encode_slice(image)?;
        self.write(&path, &f)?;
        Ok(f)
    }

    fn segment(
        &self,
        embedding: &FeatureMap,
        context: &[AttendedEntry],
        prompt: Option<&Grid2>,
        clock: &mut StageClock,
    ) -> Result<SegmentOutput, BackendError> {
        self.inner.segment(embedding, context, prompt, clock)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::SyntheticBackend;
    use crate::preproc::to_three_channel;

    #[test]
    fn cached_embedding_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let b = CachedBackend::new(SyntheticBackend::default(), dir.path()).unwrap();
        let img = to_three_channel(&Grid2::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let first = b.encode_slice(&img).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let second = b.encode_slice(&img).unwrap();
        assert_eq!(first, second);
        let direct = SyntheticBackend::default().encode_slice(&img).unwrap();
        assert_eq!(first, direct);
    }
}
