use crate::audio::{fix_length, load_waveform_at, LengthMode, UtteranceRecord, SAMPLE_RATE, TARGET_LEN};
use crate::error::Result;
use crate::features::{featurize, SpectroImage, IMAGE_SIZE};
use crate::nn::Tensor;

const IMAGE_LEN: usize = 3 * IMAGE_SIZE * IMAGE_SIZE;

/// Loads one utterance, fixes its length and renders the spectral image.
pub fn utterance_image(rec: &UtteranceRecord, mode: LengthMode, seed: u64) -> Result<SpectroImage> {
    let w = load_waveform_at(&rec.path, SAMPLE_RATE)?;
    let w = fix_length(&w, TARGET_LEN, mode, seed)?;
    featurize(&w)
}

/// Deterministic (prefix-crop / tiled) features of a fixed record list,
/// cached in `f32` for the first `cache_limit` records.
pub struct FeatureBank {
    records: Vec<UtteranceRecord>,
    cache: Vec<Option<Vec<f32>>>,
    cache_limit: usize,
}

impl FeatureBank {
    pub fn new(records: Vec<UtteranceRecord>, cache_limit: usize) -> Self {
        let n = records.len();
        Self {
            records,
            cache: vec![None; n],
            cache_limit,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    fn features(&mut self, i: usize) -> Result<Vec<f32>> {
        if let Some(v) = &self.cache[i] {
            return Ok(v.clone());
        }
        let img = utterance_image(&self.records[i], LengthMode::CropFixed, 0)?;
        let v = img.to_f32();
        if i < self.cache_limit {
            self.cache[i] = Some(v.clone());
        }
        Ok(v)
    }

    /// `[N,3,256,256]` batch of the given record indices.
    pub fn batch(&mut self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * IMAGE_LEN);
        for &i in idx {
            data.extend(self.features(i)?);
        }
        Ok(Tensor::new(&[idx.len(), 3, IMAGE_SIZE, IMAGE_SIZE], data))
    }
}
