//! Inference: prepared volume in, probability map and detections out.

use crate::error::Result;
use crate::net::{NetworkParams, Tensor};
use crate::postprocess::{extract_detections, DetectionSet, ExtractConfig};
use crate::preprocess::{PrepConfig, VoiCenter};
use crate::targetmap::ProbabilityMap;
use crate::volume::Volume;

/// Runs the network on each prepared volume, `batch_size` at a time.
pub fn predict_maps(net: &NetworkParams<f32>, inputs: &[Volume], batch_size: usize, scale: f64) -> Result<Vec<ProbabilityMap>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let dims = chunk[0].shape();
        let mut data = Vec::with_capacity(chunk.len() * chunk[0].len());
        for v in chunk {
            data.extend_from_slice(v.data());
        }
        let pred = net.forward_eval(&Tensor::from_vec(chunk.len(), 1, dims, data)?)?;
        for (n, v) in chunk.iter().enumerate() {
            out.push(ProbabilityMap::new(v.with_data(pred.sample(n).to_vec())?, scale)?);
        }
    }
    Ok(out)
}

pub fn predict_map(net: &NetworkParams<f32>, input: &Volume, scale: f64) -> Result<ProbabilityMap> {
    Ok(predict_maps(net, std::slice::from_ref(input), 1, scale)?.remove(0))
}

/// Preprocesses a raw volume, predicts its map and extracts seed locations.
pub fn detect_seeds(
    net: &NetworkParams<f32>,
    raw: &Volume,
    prep: &PrepConfig,
    center: VoiCenter,
    scale: f64,
    extract: &ExtractConfig,
) -> Result<(ProbabilityMap, DetectionSet)> {
    let c = prep.resolve_center(raw, None, center)?;
    let input = prep.prepare(raw, c)?;
    let map = predict_map(net, &input, scale)?;
    let dets = extract_detections(&map, extract)?;
    Ok((map, dets))
}
