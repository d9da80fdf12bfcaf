//! `PCN1` network checkpoints.
//!
//! Layout: magic, u32 patch, depth, classes, conv1, conv2, hidden, u32 value
//! count, then f32 values: the parameter groups in `GROUP_NAMES` order
//! followed by running mean and variance of the three batch-norm layers.

use std::path::Path;

use super::net::{Cnn, CnnSpec};
use crate::data::io::{check_magic, read_file, u32_at, write_file};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"PCN1";
const HEADER: usize = 4 + 7 * 4;

fn value_count(net: &Cnn) -> usize {
    net.params.len() + net.running.iter().map(|r| 2 * r.mean.len()).sum::<usize>()
}

pub fn write_cnn(net: &Cnn) -> Vec<u8> {
    let s = &net.spec;
    let mut out = Vec::with_capacity(HEADER + 4 * value_count(net));
    out.extend_from_slice(&MAGIC);
    for v in [s.patch, s.depth, s.classes, s.conv1, s.conv2, s.hidden, value_count(net)] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let running = net
        .running
        .iter()
        .flat_map(|r| [r.mean.as_slice(), r.var.as_slice()]);
    for g in net.params.groups().into_iter().chain(running) {
        for v in g {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_cnn(bytes: &[u8]) -> Result<Cnn> {
    check_magic(bytes, MAGIC)?;
    if bytes.len() < HEADER {
        return Err(Error::Truncated {
            expected: HEADER,
            found: bytes.len(),
        });
    }
    let field = |i: usize| u32_at(bytes, 4 + 4 * i) as usize;
    let spec = CnnSpec {
        patch: field(0),
        depth: field(1),
        classes: field(2),
        conv1: field(3),
        conv2: field(4),
        hidden: field(5),
    };
    spec.validate()?;
    let mut net = Cnn::init(spec, 0)?;
    let count = field(6);
    if count != value_count(&net) {
        return Err(Error::Shape(format!(
            "checkpoint holds {count} values, spec needs {}",
            value_count(&net)
        )));
    }
    let need = HEADER + 4 * count;
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: bytes.len(),
        });
    }
    let mut values = bytes[HEADER..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let Cnn { params, running, .. } = &mut net;
    let running = running
        .iter_mut()
        .flat_map(|r| [r.mean.as_mut_slice(), r.var.as_mut_slice()]);
    for g in params.groups_mut().into_iter().chain(running) {
        for v in g.iter_mut() {
            *v = values.next().expect("count checked");
        }
    }
    Ok(net)
}

pub fn save_cnn(net: &Cnn, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &write_cnn(net))
}

pub fn load_cnn(path: impl AsRef<Path>) -> Result<Cnn> {
    read_cnn(&read_file(path.as_ref())?)
}
