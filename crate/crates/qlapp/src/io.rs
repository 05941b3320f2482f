//! File formats: model and config JSON, event and covariate CSV, event maps and book
//! trajectories.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use qlapp_core::lob::{BookState, EventMap, EventMapEntry, Replay, Side};
use qlapp_core::{CovariateJump, ModelSpec, PointPath};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| AppError::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| AppError::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| AppError::io(path, e))
}

/// Reads a model file and checks its shapes.
pub fn read_model(path: &Path) -> Result<ModelSpec> {
    let m: ModelSpec = read_json(path)?;
    m.check_shapes()?;
    Ok(m)
}

/// Decimal rendering of `x` with exactly 17 significant digits, which round-trips every f64.
pub fn format_sig17(x: f64) -> String {
    if x == 0.0 {
        return "0.0000000000000000".to_string();
    }
    let sci = format!("{:.16e}", x);
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    let neg = mant.starts_with('-');
    let digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
    let mut out = String::with_capacity(digits.len() + 8);
    if neg {
        out.push('-');
    }
    if exp < 0 {
        out.push_str("0.");
        out.extend(std::iter::repeat('0').take((-exp - 1) as usize));
        out.push_str(&digits);
    } else if exp as usize >= digits.len() - 1 {
        out.push_str(&digits);
        out.extend(std::iter::repeat('0').take(exp as usize + 1 - digits.len()));
    } else {
        let k = exp as usize + 1;
        out.push_str(&digits[..k]);
        out.push('.');
        out.push_str(&digits[k..]);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct EventRow {
    component: usize,
    time: String,
}

/// Writes `component,time` rows, pre-sample events first, each block in time order.
pub fn write_events_csv<W: Write>(w: W, path: &PointPath) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut rows: Vec<(f64, usize)> = Vec::new();
    let mut push = |block: &[Vec<f64>]| {
        let mut v: Vec<(f64, usize)> =
            block.iter().enumerate().flat_map(|(a, ev)| ev.iter().map(move |&t| (t, a))).collect();
        v.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        rows.extend(v);
    };
    push(&path.presample);
    push(&path.events);
    if rows.is_empty() {
        wr.write_record(["component", "time"])?;
    }
    for (t, a) in rows {
        wr.serialize(EventRow { component: a, time: format_sig17(t) })?;
    }
    wr.flush().map_err(|e| AppError::io("<events>", e))?;
    Ok(())
}

/// Reads `component,time` rows for `model`; times at or before `T0` go to the pre-sample block.
pub fn read_events_csv<R: Read>(r: R, model: &ModelSpec) -> Result<PointPath> {
    let mut rd = csv::Reader::from_reader(r);
    let d = model.d;
    let mut events = vec![Vec::new(); d];
    let mut presample = vec![Vec::new(); d];
    for row in rd.deserialize() {
        let row: EventRow = row?;
        let t: f64 = row
            .time
            .trim()
            .parse()
            .map_err(|_| AppError::Invalid(format!("bad event time {:?}", row.time)))?;
        if row.component >= d {
            return Err(AppError::Invalid(format!("component {} but the model has d = {d}", row.component)));
        }
        if t <= model.horizon.t0 {
            presample[row.component].push(t);
        } else {
            events[row.component].push(t);
        }
    }
    for v in events.iter_mut().chain(presample.iter_mut()) {
        v.sort_by(f64::total_cmp);
    }
    let path = PointPath { horizon: model.horizon, n: model.n, events, presample, external: Vec::new() };
    path.validate()?;
    Ok(path)
}

/// Writes the external covariate as levels: header `time,x_1..x_k`, one row per jump.
pub fn write_covariate_csv<W: Write>(w: W, jumps: &[CovariateJump], dim: usize) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["time".to_string()];
    header.extend((1..=dim).map(|i| format!("x_{i}")));
    wr.write_record(&header)?;
    let mut level = vec![0.0; dim];
    for j in jumps {
        if j.increments.len() != dim {
            return Err(AppError::Invalid(format!("covariate jump of width {} in a {dim}-column block", j.increments.len())));
        }
        let mut rec = vec![format_sig17(j.time)];
        for (x, dx) in level.iter_mut().zip(&j.increments) {
            *x += dx;
            rec.push(format_sig17(*x));
        }
        wr.write_record(&rec)?;
    }
    wr.flush().map_err(|e| AppError::io("<covariate>", e))?;
    Ok(())
}

/// Inverse of [`write_covariate_csv`]: levels are differenced back into jumps, starting from 0.
pub fn read_covariate_csv<R: Read>(r: R) -> Result<Vec<CovariateJump>> {
    let mut rd = csv::Reader::from_reader(r);
    let dim = rd.headers()?.len().saturating_sub(1);
    let mut prev = vec![0.0; dim];
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|_| AppError::Invalid(format!("bad covariate value {s:?}"))))
            .collect::<Result<_>>()?;
        let (t, x) = vals.split_first().ok_or_else(|| AppError::Invalid("empty covariate row".into()))?;
        let increments = x.iter().zip(&prev).map(|(a, b)| a - b).collect();
        prev.copy_from_slice(x);
        out.push(CovariateJump { time: *t, increments });
    }
    Ok(out)
}

pub fn read_event_map(path: &Path, d: usize, book: &BookState) -> Result<EventMap> {
    let entries: Vec<EventMapEntry> = read_json(path)?;
    Ok(EventMap::new(entries, d, book)?)
}

fn level_id(side: Side, level: usize) -> String {
    match side {
        Side::Ask => format!("ask_{level}"),
        Side::Bid => format!("bid_{level}"),
    }
}

/// Long-format `time,level_id,count` rows, every level at every snapshot.
pub fn write_trajectory_csv<W: Write>(w: W, replay: &Replay) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["time", "level_id", "count"])?;
    for snap in &replay.trajectory {
        let t = format_sig17(snap.time);
        for side in [Side::Ask, Side::Bid] {
            for level in 1..=snap.state.levels(side) {
                let count = snap.state.queue(side, level).to_string();
                wr.write_record([t.as_str(), level_id(side, level).as_str(), count.as_str()])?;
            }
        }
    }
    wr.flush().map_err(|e| AppError::io("<trajectory>", e))?;
    Ok(())
}
