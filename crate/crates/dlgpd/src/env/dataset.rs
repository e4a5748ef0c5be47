//! On-disk rollout dataset format.
//!
//! A dataset is a directory holding `manifest.json` plus one binary record
//! per rollout, `rollout_00000.bin`, `rollout_00001.bin`, ...
//!
//! Record layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DLGR"
//! 4       4     u32 format version (= 1)
//! 8       4     u32 T, number of transitions
//! 12      4     u32 number of frames (= T + 2)
//! 16      4     u32 frame height (= 64)
//! 20      4     u32 frame width  (= 64)
//! 24      4     u32 channels     (= 3)
//! 28      8     f64 bootstrap action a_0
//! 36      16    f64 init state (theta, theta_dot)
//! 52      1     u8 flag: true states present (0/1)
//! 53      ...   frames: (T+2) * C*H*W bytes, channel-major per frame
//! ...     ...   actions: T f64
//! ...     ...   rewards: T f64
//! ...     ...   true states (if flag): (T+2) * 2 f64 (theta, theta_dot)
//! ```
//!
//! Pixels are stored as 8 bits per channel and exposed as `[0, 1]` reals in
//! memory; the quantized values round-trip exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::render::{Frame, FRAME_CHANNELS, FRAME_SIZE};
use super::rollout::Rollout;
use super::{PendulumParams, PhysicalState};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DLGR";

/// Dataset-level metadata, stored as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub env: PendulumParams,
    /// Variant identifier (e.g. "base", "inverted-action", "mass-0.2").
    pub variant: String,
    pub seed: u64,
    pub rollout_count: usize,
    pub rollout_len: usize,
}

fn rollout_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("rollout_{index:05}.bin"))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn encode_rollout(r: &Rollout) -> Result<Vec<u8>> {
    r.validate_chaining()?;
    let t = r.len();
    let nframes = r.frames.len();
    let mut buf = Vec::with_capacity(53 + nframes * FRAME_CHANNELS * FRAME_SIZE * FRAME_SIZE + t * 16);
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, t as u32);
    put_u32(&mut buf, nframes as u32);
    put_u32(&mut buf, FRAME_SIZE as u32);
    put_u32(&mut buf, FRAME_SIZE as u32);
    put_u32(&mut buf, FRAME_CHANNELS as u32);
    put_f64(&mut buf, r.bootstrap_action);
    put_f64(&mut buf, r.init_state.theta);
    put_f64(&mut buf, r.init_state.theta_dot);
    buf.push(u8::from(r.true_states.is_some()));
    for f in &r.frames {
        buf.extend_from_slice(f.bytes());
    }
    for &a in &r.actions {
        put_f64(&mut buf, a);
    }
    for &rw in &r.rewards {
        put_f64(&mut buf, rw);
    }
    if let Some(states) = &r.true_states {
        for s in states {
            put_f64(&mut buf, s.theta);
            put_f64(&mut buf, s.theta_dot);
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated rollout record".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_rollout(buf: &[u8]) -> Result<Rollout> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic; not a rollout record".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported record version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let t = c.u32()? as usize;
    let nframes = c.u32()? as usize;
    let h = c.u32()? as usize;
    let w = c.u32()? as usize;
    let ch = c.u32()? as usize;
    if h != FRAME_SIZE || w != FRAME_SIZE || ch != FRAME_CHANNELS {
        return Err(Error::Format(format!("unexpected frame geometry {ch}x{h}x{w}")));
    }
    if nframes != t + 2 {
        return Err(Error::Format(format!("frame count {nframes} != T + 2 = {}", t + 2)));
    }
    let bootstrap_action = c.f64()?;
    let init_state = PhysicalState::new(c.f64()?, c.f64()?);
    let has_states = c.take(1)?[0] != 0;
    let mut frames = Vec::with_capacity(nframes);
    let frame_bytes = FRAME_CHANNELS * FRAME_SIZE * FRAME_SIZE;
    for _ in 0..nframes {
        frames.push(Frame::from_bytes(c.take(frame_bytes)?.to_vec())?);
    }
    let mut actions = Vec::with_capacity(t);
    for _ in 0..t {
        actions.push(c.f64()?);
    }
    let mut rewards = Vec::with_capacity(t);
    for _ in 0..t {
        rewards.push(c.f64()?);
    }
    let true_states = if has_states {
        let mut v = Vec::with_capacity(nframes);
        for _ in 0..nframes {
            v.push(PhysicalState::new(c.f64()?, c.f64()?));
        }
        Some(v)
    } else {
        None
    };
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes in rollout record".into()));
    }
    let r = Rollout {
        frames,
        bootstrap_action,
        actions,
        rewards,
        init_state,
        true_states,
    };
    r.validate_chaining()?;
    Ok(r)
}

/// Writes a dataset directory. Existing rollout files are kept when they are
/// already present (resume semantics); the manifest must match in that case.
pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, rollouts: &[Rollout]) -> Result<()> {
    if manifest.rollout_count != rollouts.len() {
        return Err(Error::Config(format!(
            "manifest says {} rollouts, got {}",
            manifest.rollout_count,
            rollouts.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let existing: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if &existing != manifest {
            return Err(Error::Config(format!(
                "dataset at {} already exists with a different manifest",
                dir.display()
            )));
        }
    } else {
        fs::write(&manifest_path, serde_json::to_string_pretty(manifest)?)?;
    }
    for (i, r) in rollouts.iter().enumerate() {
        let path = rollout_path(dir, i);
        if path.exists() {
            continue;
        }
        let bytes = encode_rollout(r)?;
        let mut f = fs::File::create(&path)?;
        f.write_all(&bytes)?;
    }
    Ok(())
}

/// Loads a dataset directory (manifest + all rollouts).
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Rollout>)> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            manifest.format_version
        )));
    }
    let mut rollouts = Vec::with_capacity(manifest.rollout_count);
    for i in 0..manifest.rollout_count {
        let path = rollout_path(dir, i);
        let mut buf = Vec::new();
        fs::File::open(&path)
            .map_err(|e| Error::Format(format!("missing rollout {}: {e}", path.display())))?
            .read_to_end(&mut buf)?;
        rollouts.push(decode_rollout(&buf)?);
    }
    Ok((manifest, rollouts))
}

/// Which rollout files of a dataset are still missing (for resuming).
pub fn missing_rollouts(dir: &Path, count: usize) -> Vec<usize> {
    (0..count).filter(|&i| !rollout_path(dir, i).exists()).collect()
}
