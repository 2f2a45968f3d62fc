//! Browser bindings: a 2-D routing explorer, the synthetic scene renderer
//! with an adjustable sensor shift, and the load-balancing run.

use spectralmoe::balance::balance_gates;
use spectralmoe::gating::{route, GateParams};
use spectralmoe::rng::{child_seed, normal, rng_from};
use spectralmoe::synthbench::{apply_shift, class_signatures, generate_scene, DomainShift, SynthSample};
use spectralmoe::{Norm, Tensor};
use wasm_bindgen::prelude::*;

const PALETTE: [[u8; 3]; 8] = [
    [230, 159, 0],
    [86, 180, 233],
    [0, 158, 115],
    [240, 228, 66],
    [0, 114, 178],
    [213, 94, 0],
    [204, 121, 167],
    [120, 120, 120],
];

type Res<T> = Result<T, String>;

fn msg(e: spectralmoe::Error) -> String {
    e.to_string()
}

fn js(e: String) -> JsValue {
    JsValue::from_str(&e)
}

fn norm_of(p: u32) -> Res<Norm> {
    Norm::from_order(p).map_err(msg)
}

/// Prototypes as a `2 × N_e` gate from interleaved `[x0, y0, x1, y1, ...]`.
fn planar_gate(protos: &[f64], p: u32) -> Res<GateParams> {
    let n = protos.len() / 2;
    if n == 0 || !protos.len().is_multiple_of(2) {
        return Err("prototypes must be x,y pairs".into());
    }
    let mut w = vec![0.0; 2 * n];
    for e in 0..n {
        w[e] = protos[2 * e];
        w[n + e] = protos[2 * e + 1];
    }
    let w_gate = Tensor::matrix(2, n, w).map_err(msg)?;
    GateParams::new(w_gate, Tensor::zeros(&[2, n]), norm_of(p)?).map_err(msg)
}

/// Gate values of the token `(x, y)`, one per prototype.
pub fn route_point(x: f64, y: f64, protos: &[f64], k: usize, p: u32) -> Res<Vec<f64>> {
    let gate = planar_gate(protos, p)?;
    let token = Tensor::matrix(1, 2, vec![x, y]).map_err(msg)?;
    let out = route(&gate, &token, k, None).map_err(msg)?;
    Ok(out.gates.row(0).to_vec())
}

/// RGBA map of `[-1, 1]²` where each pixel blends expert colors by gate
/// weight.
pub fn routing_map(protos: &[f64], k: usize, p: u32, size: usize) -> Res<Vec<u8>> {
    let gate = planar_gate(protos, p)?;
    let coord = |i: usize| -1.0 + 2.0 * (i as f64 + 0.5) / size as f64;
    let mut tokens = Vec::with_capacity(2 * size * size);
    for row in 0..size {
        for col in 0..size {
            tokens.push(coord(col));
            tokens.push(-coord(row));
        }
    }
    let tokens = Tensor::matrix(size * size, 2, tokens).map_err(msg)?;
    let out = route(&gate, &tokens, k, None).map_err(msg)?;
    let mut rgba = Vec::with_capacity(4 * size * size);
    for i in 0..size * size {
        let mut c = [0.0f64; 3];
        for (e, g) in out.gates.row(i).iter().enumerate() {
            for (ch, v) in c.iter_mut().enumerate() {
                *v += g * PALETTE[e % PALETTE.len()][ch] as f64;
            }
        }
        rgba.extend(c.iter().map(|v| v.round() as u8));
        rgba.push(255);
    }
    Ok(rgba)
}

/// Default sensor shift scaled by `strength`: 0 is the source sensor, 1 the
/// default target.
fn scaled_shift(channels: usize, strength: f64) -> DomainShift {
    let full = DomainShift::default_target(channels);
    DomainShift {
        gain: full.gain.iter().map(|g| 1.0 + strength * (g - 1.0)).collect(),
        bias: full.bias.iter().map(|b| strength * b).collect(),
        gamma: full.gamma.iter().map(|g| 1.0 + strength * (g - 1.0)).collect(),
        noise_sigma: strength * full.noise_sigma,
    }
}

fn shifted_scene(seed: u64, size: usize, classes: usize, channels: usize, strength: f64) -> Res<SynthSample> {
    let scene = generate_scene(seed, size, size, classes, channels).map_err(msg)?;
    if strength == 0.0 {
        return Ok(scene);
    }
    let shift = scaled_shift(channels, strength);
    apply_shift(&scene, &shift, &mut rng_from(child_seed(seed, "shift"))).map_err(msg)
}

/// False-color RGBA of a scene: bands 0, C/2 and C−1 as red, green, blue.
pub fn render_scene(seed: u64, size: usize, classes: usize, channels: usize, strength: f64) -> Res<Vec<u8>> {
    let s = shifted_scene(seed, size, classes, channels, strength)?;
    let plane = size * size;
    let bands = [0, channels / 2, channels - 1];
    let data = s.image.data();
    let mut rgba = Vec::with_capacity(4 * plane);
    for i in 0..plane {
        for b in bands {
            rgba.push((data[b * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        rgba.push(255);
    }
    Ok(rgba)
}

/// RGBA of a scene's class labels.
pub fn render_labels(seed: u64, size: usize, classes: usize, channels: usize) -> Res<Vec<u8>> {
    let s = generate_scene(seed, size, size, classes, channels).map_err(msg)?;
    Ok(s.labels.iter().flat_map(|&l| {
        let [r, g, b] = PALETTE[l % PALETTE.len()];
        [r, g, b, 255]
    }).collect())
}

/// Per-band mean of a scene, for the spectrum plot beside the image.
pub fn band_means(seed: u64, size: usize, classes: usize, channels: usize, strength: f64) -> Res<Vec<f64>> {
    let s = shifted_scene(seed, size, classes, channels, strength)?;
    let plane = (size * size) as f64;
    Ok(s.image.data().chunks(size * size).map(|band| band.iter().sum::<f64>() / plane).collect())
}

/// Class signatures flattened `K × C`.
pub fn signatures(classes: usize, channels: usize) -> Res<Vec<f64>> {
    Ok(class_signatures(classes, channels).map_err(msg)?.concat())
}

/// Trains both gates on the load loss alone. Returns `(steps + 1)` rows of
/// `[load, ratio, visual importance × N_e]`, starting from gates whose
/// experts past the first two are pushed away by `skew`.
pub fn balance_run(seed: u64, experts: usize, k: usize, skew: f64, steps: usize, lr: f64) -> Res<Vec<f64>> {
    let (d, tokens) = (16, 256);
    let gate = |label: &str| -> Res<GateParams> {
        let mut g = GateParams::init(d, experts, Norm::L1, &mut rng_from(child_seed(seed, label))).map_err(msg)?;
        for i in 0..d {
            for e in 2.min(experts)..experts {
                let v = g.w_gate.value.row(i)[e];
                g.w_gate.value.set(i, e, v + skew);
            }
        }
        Ok(g)
    };
    let sample = |label: &str| {
        let mut rng = rng_from(child_seed(seed, label));
        Tensor::matrix(tokens, d, (0..tokens * d).map(|_| normal(&mut rng)).collect()).map_err(msg)
    };
    let (mut visual, mut depth) = (gate("visual")?, gate("depth")?);
    let history = balance_gates(&mut visual, &mut depth, &sample("fv")?, &sample("fd")?, k, steps, lr).map_err(msg)?;
    Ok(history
        .iter()
        .flat_map(|h| {
            let mut row = vec![h.load, h.max_min_ratio()];
            row.extend(&h.importance_visual);
            row
        })
        .collect())
}

// Seeds cross the boundary as u32 so JS passes plain numbers, not BigInt.

#[wasm_bindgen(js_name = route_point)]
pub fn route_point_js(x: f64, y: f64, protos: &[f64], k: usize, p: u32) -> Result<Vec<f64>, JsValue> {
    route_point(x, y, protos, k, p).map_err(js)
}

#[wasm_bindgen(js_name = routing_map)]
pub fn routing_map_js(protos: &[f64], k: usize, p: u32, size: usize) -> Result<Vec<u8>, JsValue> {
    routing_map(protos, k, p, size).map_err(js)
}

#[wasm_bindgen(js_name = render_scene)]
pub fn render_scene_js(seed: u32, size: usize, classes: usize, channels: usize, strength: f64) -> Result<Vec<u8>, JsValue> {
    render_scene(seed as u64, size, classes, channels, strength).map_err(js)
}

#[wasm_bindgen(js_name = render_labels)]
pub fn render_labels_js(seed: u32, size: usize, classes: usize, channels: usize) -> Result<Vec<u8>, JsValue> {
    render_labels(seed as u64, size, classes, channels).map_err(js)
}

#[wasm_bindgen(js_name = band_means)]
pub fn band_means_js(seed: u32, size: usize, classes: usize, channels: usize, strength: f64) -> Result<Vec<f64>, JsValue> {
    band_means(seed as u64, size, classes, channels, strength).map_err(js)
}

#[wasm_bindgen(js_name = signatures)]
pub fn signatures_js(classes: usize, channels: usize) -> Result<Vec<f64>, JsValue> {
    signatures(classes, channels).map_err(js)
}

#[wasm_bindgen(js_name = balance_run)]
pub fn balance_run_js(seed: u32, experts: usize, k: usize, skew: f64, steps: usize, lr: f64) -> Result<Vec<f64>, JsValue> {
    balance_run(seed as u64, experts, k, skew, steps, lr).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PROTOS: [f64; 6] = [-0.5, 0.0, 0.5, 0.0, 0.0, 0.7];

    #[test]
    fn point_routes_to_nearest_prototypes() {
        let g = route_point(-0.5, 0.0, &PROTOS, 1, 2).unwrap();
        assert_eq!(g, vec![1.0, 0.0, 0.0]);
        let g = route_point(0.4, 0.1, &PROTOS, 2, 1).unwrap();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(g.iter().filter(|&&v| v > 0.0).count(), 2);
        assert!(g[1] > g[0]);
    }

    #[test]
    fn map_is_opaque_and_sized() {
        let px = routing_map(&PROTOS, 2, 2, 16).unwrap();
        assert_eq!(px.len(), 4 * 256);
        assert!(px.chunks(4).all(|c| c[3] == 255));
    }

    #[test]
    fn zero_strength_is_the_source_scene() {
        let a = render_scene(3, 32, 5, 8, 0.0).unwrap();
        let s = generate_scene(3, 32, 32, 5, 8).unwrap();
        let red: Vec<u8> = s.image.data()[..32 * 32].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        assert_eq!(a.chunks(4).map(|c| c[0]).collect::<Vec<_>>(), red);
        let dark = band_means(3, 32, 5, 8, 1.0).unwrap();
        let bright = band_means(3, 32, 5, 8, 0.0).unwrap();
        assert!(dark.iter().sum::<f64>() < bright.iter().sum::<f64>());
    }

    #[test]
    fn balance_run_rows() {
        let out = balance_run(1, 6, 2, 0.3, 50, 0.02).unwrap();
        assert_eq!(out.len(), 51 * 8);
        assert!(out[50 * 8] < out[0]);
    }

    #[test]
    fn bad_inputs_are_errors_not_panics() {
        assert!(planar_gate(&[1.0, 2.0, 3.0], 1).is_err());
        assert!(norm_of(3).is_err());
    }
}
