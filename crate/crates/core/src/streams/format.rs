//! Binary task-stream format for pre-extracted feature vectors.
//!
//! All integers little-endian:
//!
//! ```text
//! magic "CLFS" | version u16 | task count u32
//! per task:
//!   task id u32 | class count u32 | dim u32 | train count u64 | val count u64
//!   train rows: dim x f32, class id u32
//!   val rows:   dim x f32, class id u32
//! ```
//!
//! Class ids are global. When tasks in a file claim overlapping ids, every
//! task is re-based onto a fresh contiguous range in file order.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use super::{ClassRange, Sample, Task, TaskStream};
use crate::codec::Reader;
use crate::error::{Error, Result};

pub const STREAM_MAGIC: &[u8; 4] = b"CLFS";
pub const STREAM_VERSION: u16 = 1;

/// Re-basing applied to one task while loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rebase {
    pub task_id: u32,
    pub original: Vec<u32>,
    pub new_start: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rebased: Vec<Rebase>,
}

pub fn write_stream<W: Write>(stream: &TaskStream, mut w: W) -> Result<()> {
    w.write_all(STREAM_MAGIC)?;
    w.write_all(&STREAM_VERSION.to_le_bytes())?;
    w.write_all(&(stream.len() as u32).to_le_bytes())?;
    for t in stream.tasks() {
        w.write_all(&t.id.to_le_bytes())?;
        w.write_all(&t.classes.count.to_le_bytes())?;
        w.write_all(&(stream.dim() as u32).to_le_bytes())?;
        w.write_all(&(t.train.len() as u64).to_le_bytes())?;
        w.write_all(&(t.val.len() as u64).to_le_bytes())?;
        for s in t.train.iter().chain(&t.val) {
            for v in &s.features {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&s.label.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_stream(stream: &TaskStream, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_stream(stream, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_feature_stream(path: impl AsRef<Path>) -> Result<(TaskStream, LoadReport)> {
    let bytes = std::fs::read(path)?;
    read_stream(&bytes)
}

struct RawTask {
    id: u32,
    class_count: u32,
    train: Vec<Sample>,
    val: Vec<Sample>,
}

pub fn read_stream(bytes: &[u8]) -> Result<(TaskStream, LoadReport)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != STREAM_MAGIC {
        return Err(r.error_at(0, "bad magic, expected CLFS".into()));
    }
    let version = r.u16()?;
    if version != STREAM_VERSION {
        return Err(r.error_at(4, format!("unsupported version {version}")));
    }
    let n_tasks = r.u32()? as usize;
    let mut dim: Option<usize> = None;
    let mut raw = Vec::with_capacity(n_tasks.min(1 << 12));
    for _ in 0..n_tasks {
        let header_at = r.offset();
        let id = r.u32()?;
        let class_count = r.u32()?;
        let task_dim = r.u32()? as usize;
        match dim {
            None => dim = Some(task_dim),
            Some(d) if d != task_dim => {
                return Err(r.error_at(
                    header_at + 8,
                    format!("task {id} has dim {task_dim}, earlier tasks have {d}"),
                ))
            }
            _ => {}
        }
        let n_train = r.u64()? as usize;
        let n_val = r.u64()? as usize;
        let row_bytes = 4 * task_dim + 4;
        let need = (n_train + n_val).saturating_mul(row_bytes);
        if need > r.remaining() {
            return Err(r.error_at(
                r.offset() + r.remaining(),
                format!("truncated: task {id} needs {need} bytes of rows, {} left", r.remaining()),
            ));
        }
        let mut read_rows = |n: usize| -> Result<Vec<Sample>> {
            (0..n)
                .map(|_| {
                    let features = (0..task_dim).map(|_| r.f32()).collect::<Result<_>>()?;
                    Ok(Sample {
                        features,
                        label: r.u32()?,
                    })
                })
                .collect()
        };
        let train = read_rows(n_train)?;
        let val = read_rows(n_val)?;
        raw.push(RawTask {
            id,
            class_count,
            train,
            val,
        });
    }
    r.finish()?;

    let ranges: Vec<Option<ClassRange>> = raw
        .iter()
        .map(|t| {
            let labels = t.train.iter().chain(&t.val).map(|s| s.label);
            let min = labels.clone().min()?;
            let max = labels.max()?;
            (max - min < t.class_count).then_some(ClassRange {
                start: min,
                count: t.class_count,
            })
        })
        .collect();
    let consistent = ranges.iter().all(Option::is_some)
        && ranges.iter().enumerate().all(|(i, a)| {
            ranges[..i]
                .iter()
                .all(|b| !a.unwrap().overlaps(&b.unwrap()))
        });

    let mut report = LoadReport::default();
    let mut tasks = Vec::with_capacity(raw.len());
    if consistent {
        for (t, range) in raw.into_iter().zip(ranges) {
            tasks.push(Task {
                id: t.id,
                classes: range.unwrap(),
                train: t.train,
                val: t.val,
            });
        }
    } else {
        let mut offset = 0u32;
        for mut t in raw {
            let original: BTreeSet<u32> = t.train.iter().chain(&t.val).map(|s| s.label).collect();
            let original: Vec<u32> = original.into_iter().collect();
            let count = t.class_count.max(original.len() as u32);
            for s in t.train.iter_mut().chain(t.val.iter_mut()) {
                let dense = original.binary_search(&s.label).expect("label collected") as u32;
                s.label = offset + dense;
            }
            log::info!(
                "re-based task {} classes {:?} onto {}..{}",
                t.id,
                original,
                offset,
                offset + count
            );
            report.rebased.push(Rebase {
                task_id: t.id,
                original,
                new_start: offset,
            });
            tasks.push(Task {
                id: t.id,
                classes: ClassRange {
                    start: offset,
                    count,
                },
                train: t.train,
                val: t.val,
            });
            offset += count;
        }
    }
    let stream = TaskStream::new(tasks, dim.unwrap_or(0)).map_err(|e| Error::Decode {
        offset: bytes.len(),
        detail: e.to_string(),
    })?;
    Ok((stream, report))
}
