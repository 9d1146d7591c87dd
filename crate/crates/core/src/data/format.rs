//! Dataset file: one JSON header line, then one JSON line per episode.
//!
//! ```text
//! {"format":"dconv-dataset","version":1,"n_episodes":N,"meta":{..},"stats":{..}}
//! {"len":T,"policy":"expert","states":[[..]..],"actions":[..],"rewards":[..]}
//! ...
//! ```
//!
//! Floats are written in shortest round-trip form, so `read(write(x))`
//! reproduces every value bit for bit. Return-to-go labels are derived on
//! read.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Action, DataError, Dataset, DatasetMeta, NormStats, Trajectory};

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "dconv-dataset";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    n_episodes: usize,
    meta: DatasetMeta,
    stats: NormStats,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeLine {
    len: usize,
    policy: String,
    states: Vec<Vec<f64>>,
    actions: Vec<Action>,
    rewards: Vec<f64>,
}

fn check_finite(ds: &Dataset) -> Result<(), DataError> {
    let bad = |what: String| Err(DataError::NonFinite { what });
    if ds.stats.mean.iter().chain(&ds.stats.std).any(|v| !v.is_finite()) {
        return bad("normalization stats".into());
    }
    for (i, t) in ds.trajectories.iter().enumerate() {
        if t.rewards.iter().any(|r| !r.is_finite()) {
            return bad(format!("episode {i} rewards"));
        }
        if t.states.iter().flatten().any(|v| !v.is_finite()) {
            return bad(format!("episode {i} states"));
        }
        let act_bad = t.actions.iter().any(|a| match a {
            Action::Continuous(v) => v.iter().any(|x| !x.is_finite()),
            Action::Discrete(_) => false,
        });
        if act_bad {
            return bad(format!("episode {i} actions"));
        }
    }
    Ok(())
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    check_finite(ds)?;
    let mut out = BufWriter::new(File::create(path)?);
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        n_episodes: ds.trajectories.len(),
        meta: ds.meta.clone(),
        stats: ds.stats.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for t in &ds.trajectories {
        let line = EpisodeLine {
            len: t.len(),
            policy: t.policy.clone(),
            states: t.states.clone(),
            actions: t.actions.clone(),
            rewards: t.rewards.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let display = path.display().to_string();
    let err = |line: usize, offset: u64, msg: String| DataError::Format {
        path: display.clone(),
        line,
        offset,
        msg,
    };
    let mut reader = BufReader::new(File::open(path)?);
    let mut buf = String::new();
    let mut offset: u64 = 0;

    let n = reader.read_line(&mut buf)?;
    if n == 0 {
        return Err(err(1, 0, "empty file, missing header".into()));
    }
    let header: Header =
        serde_json::from_str(buf.trim_end()).map_err(|e| err(1, 0, format!("bad header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(err(1, 0, format!("not a dataset file (format tag {:?})", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(err(
            1,
            0,
            format!("version mismatch: file {} but reader {FORMAT_VERSION}", header.version),
        ));
    }
    offset += n as u64;

    let mut trajectories = Vec::with_capacity(header.n_episodes);
    let mut line_no = 1;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let here = offset;
        offset += n as u64;
        if buf.trim().is_empty() {
            continue;
        }
        if trajectories.len() == header.n_episodes {
            return Err(err(
                line_no,
                here,
                format!("header declares {} episodes but more follow", header.n_episodes),
            ));
        }
        if !buf.ends_with('\n') {
            return Err(err(line_no, here, "truncated episode record (no line terminator)".into()));
        }
        let ep: EpisodeLine = serde_json::from_str(buf.trim_end())
            .map_err(|e| err(line_no, here, format!("bad episode record: {e}")))?;
        if ep.states.len() != ep.len || ep.actions.len() != ep.len || ep.rewards.len() != ep.len {
            return Err(err(
                line_no,
                here,
                format!(
                    "episode length header {} disagrees with {} states / {} actions / {} rewards",
                    ep.len,
                    ep.states.len(),
                    ep.actions.len(),
                    ep.rewards.len()
                ),
            ));
        }
        let t = Trajectory::new(ep.states, ep.actions, ep.rewards, ep.policy)
            .map_err(|e| err(line_no, here, e.to_string()))?;
        t.validate(header.meta.state_dim, header.meta.action_space)
            .map_err(|e| err(line_no, here, e.to_string()))?;
        trajectories.push(t);
    }
    if trajectories.len() != header.n_episodes {
        return Err(err(
            line_no,
            offset,
            format!(
                "truncated: header declares {} episodes, found {}",
                header.n_episodes,
                trajectories.len()
            ),
        ));
    }
    if trajectories.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(Dataset::from_parts(header.meta, header.stats, trajectories))
}
