//! Episode dataset files.
//!
//! Both encodings store one record per window, ordered by patient and then
//! window index:
//!
//! `patient_id, window_index, x00..x43, m00..m43, vt, peep, fio2, reward, done, survived_90d`
//!
//! CSV: the first line is `# confdqn-episodes v1`, followed by the header
//! row. Reals use the shortest representation that parses back to the same
//! bits (`NaN` for missing values); booleans are `0`/`1`.
//!
//! Binary (little-endian): magic `CDQE`, `u32` version, `u64` record count,
//! then per record `u64 patient_id`, `u32 window_index`, 44 × `f64`,
//! `u64` missing-mask bitset (bit `i` = feature `i`), 3 × `u8` action levels,
//! `f64 reward`, `u8 done`, `u8 survived_90d`.

use std::path::Path;

use super::action::{decode_action, encode_action, ActionTriple};
use super::episode::{Episode, StateVector, Step};
use super::features::N_FEATURES;
use crate::error::{Error, Result};
use crate::io_util::{read_artifact, read_artifact_bytes, write_atomic};

pub const CSV_MAGIC: &str = "# confdqn-episodes v1";
pub const BINARY_MAGIC: &[u8; 4] = b"CDQE";
pub const FORMAT_VERSION: u32 = 1;

pub fn csv_header() -> Vec<String> {
    let mut h = vec!["patient_id".to_string(), "window_index".to_string()];
    h.extend((0..N_FEATURES).map(|i| format!("x{i:02}")));
    h.extend((0..N_FEATURES).map(|i| format!("m{i:02}")));
    for c in ["vt", "peep", "fio2", "reward", "done", "survived_90d"] {
        h.push(c.to_string());
    }
    h
}

struct Record {
    patient_id: u64,
    window: u32,
    values: Vec<f64>,
    mask: Vec<bool>,
    action: ActionTriple,
    reward: f64,
    done: bool,
    survived: bool,
}

fn records(episodes: &[Episode]) -> impl Iterator<Item = Result<Record>> + '_ {
    episodes.iter().flat_map(|ep| {
        ep.steps.iter().enumerate().map(move |(t, s)| {
            Ok(Record {
                patient_id: ep.patient_id,
                window: t as u32,
                values: s.state.values().to_vec(),
                mask: s.state.mask().to_vec(),
                action: decode_action(s.action)?,
                reward: s.reward,
                done: s.done,
                survived: ep.survived_90d,
            })
        })
    })
}

fn assemble(records: Vec<Record>, path: &Path) -> Result<Vec<Episode>> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut out: Vec<Episode> = Vec::new();
    for r in records {
        let step = Step {
            state: StateVector::with_mask(r.values, r.mask)?,
            action: encode_action(r.action)?,
            reward: r.reward,
            done: r.done,
        };
        match out.last_mut() {
            Some(ep) if ep.patient_id == r.patient_id => {
                if r.window as usize != ep.steps.len() {
                    return Err(bad(format!(
                        "patient {} window {} out of order",
                        r.patient_id, r.window
                    )));
                }
                if ep.survived_90d != r.survived {
                    return Err(bad(format!("patient {} has mixed outcomes", r.patient_id)));
                }
                ep.steps.push(step);
            }
            _ => {
                if r.window != 0 {
                    return Err(bad(format!(
                        "patient {} starts at window {}",
                        r.patient_id, r.window
                    )));
                }
                if out.iter().any(|e| e.patient_id == r.patient_id) {
                    return Err(bad(format!("patient {} is not contiguous", r.patient_id)));
                }
                out.push(Episode {
                    patient_id: r.patient_id,
                    steps: vec![step],
                    survived_90d: r.survived,
                });
            }
        }
    }
    Ok(out)
}

pub fn episodes_to_csv(episodes: &[Episode]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CSV_MAGIC.as_bytes());
    buf.push(b'\n');
    {
        let mut w = csv::WriterBuilder::new().from_writer(&mut buf);
        w.write_record(csv_header())?;
        let mut row: Vec<String> = Vec::with_capacity(2 + 2 * N_FEATURES + 6);
        for rec in records(episodes) {
            let rec = rec?;
            row.clear();
            row.push(rec.patient_id.to_string());
            row.push(rec.window.to_string());
            row.extend(rec.values.iter().map(|v| v.to_string()));
            row.extend(rec.mask.iter().map(|&m| if m { "1" } else { "0" }.to_string()));
            row.extend(rec.action.components().iter().map(|c| c.to_string()));
            row.push(rec.reward.to_string());
            row.push(if rec.done { "1" } else { "0" }.to_string());
            row.push(if rec.survived { "1" } else { "0" }.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(buf)
}

pub fn episodes_from_csv(text: &str, path: &Path) -> Result<Vec<Episode>> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let body = text
        .strip_prefix(CSV_MAGIC)
        .and_then(|s| s.strip_prefix('\n'))
        .ok_or_else(|| bad("missing `# confdqn-episodes v1` preamble".into()))?;
    let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != csv_header() {
        return Err(bad("unexpected column layout".into()));
    }
    let parse_f = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}"))) };
    let parse_b = |s: &str| -> Result<bool> {
        match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(format!("expected 0/1, got {s:?}"))),
        }
    };
    let parse_u = |s: &str| -> Result<u64> { s.parse::<u64>().map_err(|e| bad(format!("{s:?}: {e}"))) };
    let mut recs = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let f = |i: usize| row.get(i).ok_or_else(|| bad("short row".into()));
        let values = (0..N_FEATURES)
            .map(|i| parse_f(f(2 + i)?))
            .collect::<Result<Vec<_>>>()?;
        let mask = (0..N_FEATURES)
            .map(|i| parse_b(f(2 + N_FEATURES + i)?))
            .collect::<Result<Vec<_>>>()?;
        let o = 2 + 2 * N_FEATURES;
        let level = |i: usize| -> Result<u8> {
            let v = parse_u(f(o + i)?)?;
            u8::try_from(v).map_err(|_| bad(format!("action level {v}")))
        };
        recs.push(Record {
            patient_id: parse_u(f(0)?)?,
            window: parse_u(f(1)?)? as u32,
            values,
            mask,
            action: ActionTriple::new(level(0)?, level(1)?, level(2)?)?,
            reward: parse_f(f(o + 3)?)?,
            done: parse_b(f(o + 4)?)?,
            survived: parse_b(f(o + 5)?)?,
        });
    }
    assemble(recs, path)
}

pub fn episodes_to_binary(episodes: &[Episode]) -> Result<Vec<u8>> {
    let recs: Vec<Record> = records(episodes).collect::<Result<_>>()?;
    let mut buf = Vec::with_capacity(16 + recs.len() * (8 + 4 + 8 * N_FEATURES + 8 + 3 + 10));
    buf.extend_from_slice(BINARY_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(recs.len() as u64).to_le_bytes());
    for r in recs {
        buf.extend_from_slice(&r.patient_id.to_le_bytes());
        buf.extend_from_slice(&r.window.to_le_bytes());
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let bits = r
            .mask
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &m)| acc | ((m as u64) << i));
        buf.extend_from_slice(&bits.to_le_bytes());
        buf.extend_from_slice(&r.action.components());
        buf.extend_from_slice(&r.reward.to_le_bytes());
        buf.push(r.done as u8);
        buf.push(r.survived as u8);
    }
    Ok(buf)
}

pub fn episodes_from_binary(bytes: &[u8], path: &Path) -> Result<Vec<Episode>> {
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated"));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4)? != BINARY_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad("unsupported version"));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let mut recs = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        let patient_id = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let window = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut values = Vec::with_capacity(N_FEATURES);
        for _ in 0..N_FEATURES {
            values.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        let bits = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mask = (0..N_FEATURES).map(|i| bits >> i & 1 == 1).collect();
        let a = take(3)?;
        let action = ActionTriple::new(a[0], a[1], a[2])?;
        let reward = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let flags = take(2)?;
        if flags[0] > 1 || flags[1] > 1 {
            return Err(bad("boolean byte out of range"));
        }
        recs.push(Record {
            patient_id,
            window,
            values,
            mask,
            action,
            reward,
            done: flags[0] == 1,
            survived: flags[1] == 1,
        });
    }
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }
    assemble(recs, path)
}

pub fn write_episodes_csv(path: &Path, episodes: &[Episode]) -> Result<()> {
    write_atomic(path, &episodes_to_csv(episodes)?)
}

pub fn read_episodes_csv(path: &Path) -> Result<Vec<Episode>> {
    episodes_from_csv(&read_artifact(path)?, path)
}

pub fn write_episodes_binary(path: &Path, episodes: &[Episode]) -> Result<()> {
    write_atomic(path, &episodes_to_binary(episodes)?)
}

pub fn read_episodes_binary(path: &Path) -> Result<Vec<Episode>> {
    episodes_from_binary(&read_artifact_bytes(path)?, path)
}
