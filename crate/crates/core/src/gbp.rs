//! Guided backpropagation attribution maps.
//!
//! The attribution of a logit is its gradient w.r.t. the input pixels,
//! except that every ReLU passes gradient back only where both its forward
//! input and the incoming gradient are positive.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::SpectrogramSegment;
use crate::error::{Error, Result};
use crate::nn::{BackwardObserver, CnnModel, ReluRule};

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub window: usize,
    /// Row-major `W × W` signed values.
    pub values: Vec<f64>,
    /// Logit (cluster id) being explained.
    pub target: usize,
    /// Source segment, `None` for averaged maps.
    pub segment_id: Option<usize>,
}

/// Gradient of logit `target` w.r.t. the input under the given ReLU rule.
pub fn input_attribution(
    model: &CnnModel,
    x: &[f64],
    target: usize,
    rule: ReluRule,
    observer: Option<&mut dyn BackwardObserver>,
) -> Result<Vec<f64>> {
    let k = model.classes();
    if target >= k {
        return Err(Error::InvalidConfig(format!(
            "attribution target {target} out of range for {k} classes"
        )));
    }
    if x.len() != model.input_len() {
        return Err(Error::Structure(format!(
            "input has {} values, model expects {}",
            x.len(),
            model.input_len()
        )));
    }
    let fwd = model.forward_sample(x, true)?;
    let mut onehot = vec![0.0; k];
    onehot[target] = 1.0;
    let rec = fwd.record.expect("recorded");
    Ok(model.backward_sample(&rec, &onehot, rule, None, observer))
}

pub fn guided_backprop(
    model: &CnnModel,
    segment: &SpectrogramSegment,
    target: usize,
) -> Result<AttributionMap> {
    let values = input_attribution(model, &segment.pixels, target, ReluRule::Guided, None)?;
    Ok(AttributionMap {
        window: segment.window,
        values,
        target,
        segment_id: Some(segment.segment_id),
    })
}

/// Index of the largest logit (lowest index on ties).
pub fn predicted_cluster(model: &CnnModel, segment: &SpectrogramSegment) -> Result<usize> {
    if segment.pixels.len() != model.input_len() {
        return Err(Error::Structure("segment does not fit the model input".into()));
    }
    let logits = model.forward_sample(&segment.pixels, false)?.logits;
    Ok(logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0)
}

/// Element-wise mean of the guided maps of `segments` for one target.
pub fn average_attribution(
    model: &CnnModel,
    segments: &[&SpectrogramSegment],
    target: usize,
) -> Result<AttributionMap> {
    let first = segments
        .first()
        .ok_or_else(|| Error::InvalidConfig("average attribution of an empty cluster".into()))?;
    let window = first.window;
    if segments.iter().any(|s| s.window != window) {
        return Err(Error::Structure("segments of mixed window sizes".into()));
    }
    let maps: Vec<Vec<f64>> = segments
        .par_iter()
        .map(|s| input_attribution(model, &s.pixels, target, ReluRule::Guided, None))
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0; window * window];
    for m in &maps {
        for (a, v) in sum.iter_mut().zip(m) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    sum.iter_mut().for_each(|v| *v /= n);
    Ok(AttributionMap {
        window,
        values: sum,
        target,
        segment_id: None,
    })
}

/// Seeded random subset of at most `cap` members, in ascending index order.
pub fn subsample<T>(items: &[T], cap: usize, seed: u64) -> Vec<&T> {
    if items.len() <= cap {
        return items.iter().collect();
    }
    let mut idx = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), items.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| &items[i]).collect()
}

/// Average map over a seeded subsample of at most `cap` cluster members.
pub fn cluster_attribution(
    model: &CnnModel,
    members: &[&SpectrogramSegment],
    target: usize,
    cap: usize,
    seed: u64,
) -> Result<AttributionMap> {
    let picked: Vec<&SpectrogramSegment> = subsample(members, cap, seed).into_iter().copied().collect();
    average_attribution(model, &picked, target)
}

/// Diverging colour map: red for positive, blue for negative, white at 0,
/// scaled by the largest magnitude.
pub fn render_ppm(map: &AttributionMap) -> String {
    let w = map.window;
    let h = map.values.len() / w.max(1);
    let scale = map.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut s = format!("P3\n{w} {h}\n255\n");
    for row in map.values.chunks(w.max(1)) {
        let px: Vec<String> = row
            .iter()
            .map(|&v| {
                let t = if scale > 0.0 { (v.abs() / scale).min(1.0) } else { 0.0 };
                let fade = (255.0 * (1.0 - t)).round() as u8;
                let (r, g, b) = if v > 0.0 {
                    (255, fade, fade)
                } else if v < 0.0 {
                    (fade, fade, 255)
                } else {
                    (255, 255, 255)
                };
                format!("{r} {g} {b}")
            })
            .collect();
        s.push_str(&px.join(" "));
        s.push('\n');
    }
    s
}

/// Raw values, one image row per line.
pub fn map_csv(map: &AttributionMap) -> String {
    let mut s = String::new();
    for row in map.values.chunks(map.window.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

/// Parses a square map written by [`map_csv`]; returns `(window, values)`.
pub fn parse_map_csv(text: &str) -> Result<(usize, Vec<f64>)> {
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(c, cell)| {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::parse(format!("line {}, column {}", i + 1, c + 1), "not a number")
                })?;
                if !v.is_finite() {
                    return Err(Error::parse(format!("line {}, column {}", i + 1, c + 1), "non-finite"));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Structure(format!(
                    "line {} has {} values, expected {w}",
                    i + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let w = width.unwrap_or(0);
    if rows != w {
        return Err(Error::Structure(format!("map has {rows} rows of width {w}, not square")));
    }
    Ok((w, values))
}

/// Writes `cluster_<id>_sample_<segment_id>.{ppm,csv}` into `dir`.
pub fn write_sample_attribution(dir: &Path, cluster: usize, map: &AttributionMap) -> Result<()> {
    let sample = map
        .segment_id
        .map_or_else(|| "avg".to_string(), |id| id.to_string());
    let stem = format!("cluster_{cluster}_sample_{sample}");
    for (ext, body) in [("ppm", render_ppm(map)), ("csv", map_csv(map))] {
        let p = dir.join(format!("{stem}.{ext}"));
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
