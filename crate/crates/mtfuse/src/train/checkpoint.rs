//! CKP1 checkpoint container.
//!
//! Layout mirrors RAS1: magic "CKP1", u32 LE header length, UTF-8 JSON
//! header, then the concatenation of all tensors as little-endian float32.
//! The header records the training config, progress counters, normalization
//! statistics, and the ordered entry table (name and element count per
//! tensor); the payload holds generator parameters, batch-norm running
//! stats, and Adam first/second moments, then the discriminator's
//! equivalents for adversarial runs. A resumed state is bitwise identical
//! to the saved one.

use super::{ModelState, TrainConfig};
use crate::error::{format_err, Result};
use crate::pipeline::NormBundle;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const CKP1_MAGIC: &[u8; 4] = b"CKP1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    global_step: u64,
    opt_g_t: u64,
    opt_d_t: Option<u64>,
    norm: Option<NormBundle>,
    entries: Vec<Entry>,
}

/// Ordered (name, tensor) list covering every float the state owns.
///
/// Adam moments exist only after the first step; `t == 0` contributes no
/// moment entries and restores to a fresh optimizer.
fn collect_tensors(state: &mut ModelState) -> Vec<(String, Vec<f32>)> {
    let mut out: Vec<(String, Vec<f32>)> = Vec::new();
    state.gen.visit_params(&mut |p| {
        out.push((format!("gen.{}", p.name), p.value.to_vec()));
    });
    state.gen.visit_buffers(&mut |b| {
        out.push((format!("gen.{}", b.name), b.value.to_vec()));
    });
    let g_names = gen_param_names(state);
    push_moments(&mut out, "opt_g", &state.opt_g, &g_names);
    if state.disc.is_some() {
        let names = disc_param_names(state);
        let disc = state.disc.as_mut().expect("checked above");
        disc.visit_params(&mut |p| {
            out.push((format!("disc.{}", p.name), p.value.to_vec()));
        });
        disc.visit_buffers(&mut |b| {
            out.push((format!("disc.{}", b.name), b.value.to_vec()));
        });
        let opt_d = state.opt_d.as_ref().expect("cGAN state carries opt_d");
        push_moments(&mut out, "opt_d", opt_d, &names);
    }
    out
}

fn gen_param_names(state: &mut ModelState) -> Vec<String> {
    let mut names = Vec::new();
    state.gen.visit_params(&mut |p| names.push(p.name));
    names
}

fn disc_param_names(state: &mut ModelState) -> Vec<String> {
    let mut names = Vec::new();
    if let Some(disc) = state.disc.as_mut() {
        disc.visit_params(&mut |p| names.push(p.name));
    }
    names
}

fn push_moments(
    out: &mut Vec<(String, Vec<f32>)>,
    prefix: &str,
    opt: &super::Adam<f32>,
    names: &[String],
) {
    if opt.t == 0 {
        return;
    }
    let (m, v) = opt.moments();
    assert_eq!(m.len(), names.len(), "optimizer slots match parameters");
    for (name, slot) in names.iter().zip(m) {
        out.push((format!("{prefix}.m.{name}"), slot.clone()));
    }
    for (name, slot) in names.iter().zip(v) {
        out.push((format!("{prefix}.v.{name}"), slot.clone()));
    }
}

pub fn save_checkpoint(path: &Path, state: &mut ModelState) -> Result<()> {
    let tensors = collect_tensors(state);
    let header = Header {
        config: state.config.clone(),
        epoch: state.epoch,
        global_step: state.global_step,
        opt_g_t: state.opt_g.t,
        opt_d_t: state.opt_d.as_ref().map(|o| o.t),
        norm: state.norm.clone(),
        entries: tensors
            .iter()
            .map(|(name, data)| Entry {
                name: name.clone(),
                len: data.len(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKP1_MAGIC)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, data) in &tensors {
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| format_err(format!("{}: file too short for CKP1 magic", path.display())))?;
    if &magic != CKP1_MAGIC {
        return Err(format_err(format!(
            "{}: bad magic {:?}, expected \"CKP1\"",
            path.display(),
            magic
        )));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|_| format_err(format!("{}: truncated header length", path.display())))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    if header_len == 0 || header_len > 1 << 20 {
        return Err(format_err(format!(
            "{}: implausible header length {header_len}",
            path.display()
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| format_err(format!("{}: truncated header", path.display())))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| format_err(format!("{}: malformed header: {e}", path.display())))?;

    let mut state = ModelState::new(header.config)?;
    state.epoch = header.epoch;
    state.global_step = header.global_step;
    state.norm = header.norm;

    // The expected entry table is reconstructed from the architecture, so a
    // renamed, missing, extra, or resized tensor is caught by name before
    // any payload is trusted.
    let expected = expected_entries(&mut state, header.opt_g_t, header.opt_d_t);
    check_entries(path, &header.entries, &expected)?;

    let total: usize = header.entries.iter().map(|e| e.len).sum();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != total * 4 {
        return Err(format_err(format!(
            "{}: payload holds {} bytes, entry table needs {}",
            path.display(),
            payload.len(),
            total * 4
        )));
    }
    let mut values = Vec::with_capacity(total);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")));
    }

    let mut offsets = Vec::with_capacity(header.entries.len());
    let mut at = 0;
    for e in &header.entries {
        offsets.push(at..at + e.len);
        at += e.len;
    }
    let mut next = offsets.into_iter();
    let mut take = |slice: &mut [f32]| {
        let range = next.next().expect("entry count was validated");
        slice.copy_from_slice(&values[range]);
    };

    state.gen.visit_params(&mut |p| take(p.value));
    state.gen.visit_buffers(&mut |b| take(b.value));
    restore_opt(&mut state.opt_g, header.opt_g_t, gen_slot_lens(&mut state.gen), &mut take);
    if let Some(disc) = state.disc.as_mut() {
        disc.visit_params(&mut |p| take(p.value));
        disc.visit_buffers(&mut |b| take(b.value));
        let lens = disc_slot_lens(disc);
        let opt_d = state.opt_d.as_mut().expect("cGAN state carries opt_d");
        let t = header.opt_d_t.unwrap_or(0);
        restore_opt(opt_d, t, lens, &mut take);
    }
    Ok(state)
}

fn gen_slot_lens(gen: &mut crate::net::Generator<f32>) -> Vec<usize> {
    let mut lens = Vec::new();
    gen.visit_params(&mut |p| lens.push(p.value.len()));
    lens
}

fn disc_slot_lens(disc: &mut crate::net::Discriminator<f32>) -> Vec<usize> {
    let mut lens = Vec::new();
    disc.visit_params(&mut |p| lens.push(p.value.len()));
    lens
}

fn restore_opt(
    opt: &mut super::Adam<f32>,
    t: u64,
    slot_lens: Vec<usize>,
    take: &mut impl FnMut(&mut [f32]),
) {
    if t == 0 {
        return;
    }
    let mut m: Vec<Vec<f32>> = slot_lens.iter().map(|&n| vec![0.0; n]).collect();
    let mut v: Vec<Vec<f32>> = slot_lens.iter().map(|&n| vec![0.0; n]).collect();
    for slot in &mut m {
        take(slot);
    }
    for slot in &mut v {
        take(slot);
    }
    opt.restore(t, m, v);
}

fn expected_entries(state: &mut ModelState, opt_g_t: u64, opt_d_t: Option<u64>) -> Vec<Entry> {
    let mut expected = Vec::new();
    state.gen.visit_params(&mut |p| {
        expected.push(Entry {
            name: format!("gen.{}", p.name),
            len: p.value.len(),
        });
    });
    state.gen.visit_buffers(&mut |b| {
        expected.push(Entry {
            name: format!("gen.{}", b.name),
            len: b.value.len(),
        });
    });
    expect_moments(&mut expected, "opt_g", opt_g_t, || {
        let mut slots = Vec::new();
        state.gen.visit_params(&mut |p| slots.push((p.name, p.value.len())));
        slots
    });
    let mut disc_slots = Vec::new();
    if let Some(disc) = state.disc.as_mut() {
        disc.visit_params(&mut |p| {
            expected.push(Entry {
                name: format!("disc.{}", p.name),
                len: p.value.len(),
            });
            disc_slots.push((p.name, p.value.len()));
        });
        disc.visit_buffers(&mut |b| {
            expected.push(Entry {
                name: format!("disc.{}", b.name),
                len: b.value.len(),
            });
        });
        expect_moments(&mut expected, "opt_d", opt_d_t.unwrap_or(0), || disc_slots);
    }
    expected
}

fn expect_moments(
    expected: &mut Vec<Entry>,
    prefix: &str,
    t: u64,
    slots: impl FnOnce() -> Vec<(String, usize)>,
) {
    if t == 0 {
        return;
    }
    let slots = slots();
    for kind in ["m", "v"] {
        for (name, len) in &slots {
            expected.push(Entry {
                name: format!("{prefix}.{kind}.{name}"),
                len: *len,
            });
        }
    }
}

fn check_entries(path: &Path, got: &[Entry], expected: &[Entry]) -> Result<()> {
    use std::collections::HashSet;
    let got_names: HashSet<&str> = got.iter().map(|e| e.name.as_str()).collect();
    let want_names: HashSet<&str> = expected.iter().map(|e| e.name.as_str()).collect();
    let missing: Vec<&&str> = want_names.difference(&got_names).collect();
    if !missing.is_empty() {
        let mut names: Vec<&str> = missing.into_iter().copied().collect();
        names.sort_unstable();
        return Err(format_err(format!(
            "{}: checkpoint is missing {} entries (first: {})",
            path.display(),
            names.len(),
            names[0]
        )));
    }
    let extra: Vec<&&str> = got_names.difference(&want_names).collect();
    if !extra.is_empty() {
        let mut names: Vec<&str> = extra.into_iter().copied().collect();
        names.sort_unstable();
        return Err(format_err(format!(
            "{}: checkpoint has {} unexpected entries (first: {})",
            path.display(),
            names.len(),
            names[0]
        )));
    }
    for (g, e) in got.iter().zip(expected) {
        if g.name != e.name {
            return Err(format_err(format!(
                "{}: entry order differs: found {} where {} belongs",
                path.display(),
                g.name,
                e.name
            )));
        }
        if g.len != e.len {
            return Err(format_err(format!(
                "{}: entry {} holds {} values, architecture needs {}",
                path.display(),
                g.name,
                g.len,
                e.len
            )));
        }
    }
    Ok(())
}
