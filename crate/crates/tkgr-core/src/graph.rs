//! Temporal knowledge graph storage: loading, id mapping, chronological
//! splits, snapshots, and query-time history windows.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};

/// One fact: subject --relation--> object at a timestamp index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quadruple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub time: usize,
}

/// String <-> dense id tables for entities and relations.
#[derive(Debug, Clone, Default)]
pub struct IdMaps {
    pub entity_names: Vec<String>,
    pub relation_names: Vec<String>,
}

impl IdMaps {
    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_names.iter().position(|n| n == name)
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_names.iter().position(|n| n == name)
    }
}

/// An indexed, immutable store of quadruples sorted by time.
#[derive(Debug, Clone)]
pub struct TemporalGraph {
    quadruples: Vec<Quadruple>,
    /// start offset of each timestamp's snapshot in `quadruples`, plus a
    /// trailing total, so `snapshot(t)` is a slice lookup
    offsets: Vec<usize>,
    pub num_entities: usize,
    pub num_relations_raw: usize,
    pub num_timestamps: usize,
    pub id_maps: Arc<IdMaps>,
    /// raw-time metadata: index = (raw - origin) / interval
    pub time_origin: i64,
    pub time_interval: i64,
}

impl TemporalGraph {
    /// Build from unsorted quadruples; sorts stably by time (file order kept
    /// within a timestamp).
    pub fn new(
        mut quadruples: Vec<Quadruple>,
        num_entities: usize,
        num_relations_raw: usize,
        num_timestamps: usize,
        id_maps: Arc<IdMaps>,
        time_origin: i64,
        time_interval: i64,
    ) -> Result<Self> {
        for q in &quadruples {
            if q.subject >= num_entities || q.object >= num_entities {
                return Err(Error::MalformedDataset(format!(
                    "entity id out of range in ({}, {}, {}, {}) with {} entities",
                    q.subject, q.relation, q.object, q.time, num_entities
                )));
            }
            if q.relation >= 2 * num_relations_raw {
                return Err(Error::MalformedDataset(format!(
                    "relation id {} out of range ({} raw relations)",
                    q.relation, num_relations_raw
                )));
            }
            if q.time >= num_timestamps {
                return Err(Error::MalformedDataset(format!(
                    "timestamp index {} out of range ({} timestamps)",
                    q.time, num_timestamps
                )));
            }
        }
        quadruples.sort_by_key(|q| q.time);
        let mut offsets = vec![0usize; num_timestamps + 1];
        for q in &quadruples {
            offsets[q.time + 1] += 1;
        }
        for t in 0..num_timestamps {
            offsets[t + 1] += offsets[t];
        }
        Ok(TemporalGraph {
            quadruples,
            offsets,
            num_entities,
            num_relations_raw,
            num_timestamps,
            id_maps,
            time_origin,
            time_interval,
        })
    }

    pub fn quadruples(&self) -> &[Quadruple] {
        &self.quadruples
    }

    pub fn len(&self) -> usize {
        self.quadruples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quadruples.is_empty()
    }

    /// Number of relation ids in use (doubled after inverse augmentation).
    pub fn num_relations(&self) -> usize {
        if self.is_inverse_augmented() {
            2 * self.num_relations_raw
        } else {
            self.num_relations_raw
        }
    }

    /// Detected from the relation-id range.
    pub fn is_inverse_augmented(&self) -> bool {
        self.quadruples
            .iter()
            .any(|q| q.relation >= self.num_relations_raw)
    }

    /// All facts at exactly timestamp `t`, in stable order.
    pub fn snapshot(&self, t: usize) -> Result<&[Quadruple]> {
        if t >= self.num_timestamps {
            return Err(Error::IndexRange {
                op: "snapshot",
                details: format!("timestamp {} of {}", t, self.num_timestamps),
            });
        }
        Ok(&self.quadruples[self.offsets[t]..self.offsets[t + 1]])
    }

    /// Timestamps whose snapshot is nonempty, ascending.
    pub fn active_timestamps(&self) -> Vec<usize> {
        (0..self.num_timestamps)
            .filter(|&t| self.offsets[t + 1] > self.offsets[t])
            .collect()
    }

    pub fn min_time(&self) -> Option<usize> {
        self.quadruples.first().map(|q| q.time)
    }

    pub fn max_time(&self) -> Option<usize> {
        self.quadruples.last().map(|q| q.time)
    }

    /// Adds `(o, r + num_relations_raw, s, t)` for every fact. Errors when the
    /// graph already holds augmented relation ids.
    pub fn add_inverse_quadruples(&self) -> Result<TemporalGraph> {
        if self.is_inverse_augmented() {
            return Err(Error::InvalidArgument {
                op: "add_inverse_quadruples",
                details: "graph already contains inverse relation ids".into(),
            });
        }
        let mut augmented = Vec::with_capacity(self.quadruples.len() * 2);
        for q in &self.quadruples {
            augmented.push(*q);
            augmented.push(Quadruple {
                subject: q.object,
                relation: q.relation + self.num_relations_raw,
                object: q.subject,
                time: q.time,
            });
        }
        TemporalGraph::new(
            augmented,
            self.num_entities,
            self.num_relations_raw,
            self.num_timestamps,
            Arc::clone(&self.id_maps),
            self.time_origin,
            self.time_interval,
        )
    }

    /// Edges with timestamps in `[max(0, t - window), t - 1]`; strictly
    /// excludes `t` and anything later. `t = 0` yields an empty history.
    pub fn history_graph(&self, t: usize, window: usize) -> Result<HistoryGraph> {
        if window == 0 {
            return Err(Error::InvalidArgument {
                op: "history_graph",
                details: "window must be >= 1".into(),
            });
        }
        if t > self.num_timestamps {
            return Err(Error::IndexRange {
                op: "history_graph",
                details: format!("reference time {} of {}", t, self.num_timestamps),
            });
        }
        let lo = t.saturating_sub(window);
        let edges = if t == 0 {
            Vec::new()
        } else {
            self.quadruples[self.offsets[lo]..self.offsets[t]].to_vec()
        };
        Ok(HistoryGraph {
            edges,
            reference_time: t,
        })
    }

    /// One fact per line: `subject<TAB>relation<TAB>object<TAB>raw_time`.
    pub fn write_quadruple_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for q in &self.quadruples {
            let raw = self.time_origin + q.time as i64 * self.time_interval;
            writeln!(out, "{}\t{}\t{}\t{}", q.subject, q.relation, q.object, raw)
                .expect("string write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// History edges feeding the encoder for one reference time.
#[derive(Debug, Clone)]
pub struct HistoryGraph {
    pub edges: Vec<Quadruple>,
    pub reference_time: usize,
}

impl HistoryGraph {
    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Chronological train/valid/test views over one id space.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub name: String,
    pub train: TemporalGraph,
    pub valid: TemporalGraph,
    pub test: TemporalGraph,
}

impl DatasetBundle {
    pub fn num_entities(&self) -> usize {
        self.train.num_entities
    }

    pub fn num_relations_raw(&self) -> usize {
        self.train.num_relations_raw
    }

    pub fn num_timestamps(&self) -> usize {
        self.train.num_timestamps
    }

    pub fn total_facts(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    /// All splits merged into one graph (same id space); history windows
    /// taken from the merged graph only ever look strictly backwards, so the
    /// merge itself leaks nothing.
    pub fn merged(&self, up_to_split: Split) -> Result<TemporalGraph> {
        let mut quadruples = self.train.quadruples().to_vec();
        if up_to_split >= Split::Valid {
            quadruples.extend_from_slice(self.valid.quadruples());
        }
        if up_to_split >= Split::Test {
            quadruples.extend_from_slice(self.test.quadruples());
        }
        TemporalGraph::new(
            quadruples,
            self.train.num_entities,
            self.train.num_relations_raw,
            self.train.num_timestamps,
            Arc::clone(&self.train.id_maps),
            self.train.time_origin,
            self.train.time_interval,
        )
    }

    pub fn split(&self, split: Split) -> &TemporalGraph {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn check_chronology(&self) -> Result<()> {
        let (t_max, v_min, v_max, s_min) = match (
            self.train.max_time(),
            self.valid.min_time(),
            self.valid.max_time(),
            self.test.min_time(),
        ) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => return Ok(()), // empty splits checked elsewhere
        };
        if !(t_max < v_min && v_min <= v_max && v_max < s_min) {
            return Err(Error::MalformedDataset(format!(
                "splits are not chronological: train ends {}, valid spans {}..{}, test starts {}",
                t_max, v_min, v_max, s_min
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

struct RawQuad {
    subject: usize,
    relation: usize,
    object: usize,
    raw_time: i64,
}

/// Load `<root>/<name>/{train,valid,test}.txt` with id maps
/// `entity2id.txt` / `relation2id.txt` and optional `stat.txt` count
/// override. Raw timestamps are normalized to dense indices.
pub fn load_dataset(root: &Path, name: &str) -> Result<DatasetBundle> {
    let dir = root.join(name);
    let entity_names = read_id_map(&dir.join("entity2id.txt"))?;
    let relation_names = read_id_map(&dir.join("relation2id.txt"))?;

    let (mut num_entities, mut num_relations) = (entity_names.len(), relation_names.len());
    let stat = dir.join("stat.txt");
    if stat.exists() {
        let text = std::fs::read_to_string(&stat).map_err(|e| Error::io(&stat, e))?;
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                file: stat.clone(),
                line: 1,
                msg: "expected `numEntities<TAB>numRelations`".into(),
            });
        }
        num_entities = parse_count(&stat, fields[0])?;
        num_relations = parse_count(&stat, fields[1])?;
    }

    let train_raw = read_quadruple_file(&dir.join("train.txt"))?;
    let valid_raw = read_quadruple_file(&dir.join("valid.txt"))?;
    let test_raw = read_quadruple_file(&dir.join("test.txt"))?;
    if train_raw.is_empty() {
        return Err(Error::MalformedDataset("no facts".into()));
    }

    // normalize raw timestamps: origin = min, interval = gcd of offsets
    let all_times: BTreeSet<i64> = train_raw
        .iter()
        .chain(&valid_raw)
        .chain(&test_raw)
        .map(|q| q.raw_time)
        .collect();
    let origin = *all_times.first().expect("nonempty");
    let mut interval: i64 = 0;
    for &t in &all_times {
        interval = gcd(interval, t - origin);
    }
    if interval == 0 {
        interval = 1;
    }
    let max_index = (all_times.last().unwrap() - origin) / interval;
    let num_timestamps = (max_index + 1) as usize;

    let id_maps = Arc::new(IdMaps {
        entity_names,
        relation_names,
    });
    let build = |raw: Vec<RawQuad>| -> Result<TemporalGraph> {
        let quads = raw
            .into_iter()
            .map(|q| Quadruple {
                subject: q.subject,
                relation: q.relation,
                object: q.object,
                time: ((q.raw_time - origin) / interval) as usize,
            })
            .collect();
        TemporalGraph::new(
            quads,
            num_entities,
            num_relations,
            num_timestamps,
            Arc::clone(&id_maps),
            origin,
            interval,
        )
    };

    let bundle = DatasetBundle {
        name: name.to_string(),
        train: build(train_raw)?,
        valid: build(valid_raw)?,
        test: build(test_raw)?,
    };
    bundle.check_chronology()?;
    Ok(bundle)
}

fn read_quadruple_file(path: &Path) -> Result<Vec<RawQuad>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut quads = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("expected at least 4 tab-separated columns, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<i64> {
            s.trim().parse::<i64>().map_err(|_| Error::Parse {
                file: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("non-integer field `{}`", s),
            })
        };
        let (s, r, o, t) = (
            parse(fields[0])?,
            parse(fields[1])?,
            parse(fields[2])?,
            parse(fields[3])?,
        );
        if s < 0 || r < 0 || o < 0 {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: lineno + 1,
                msg: "negative id".into(),
            });
        }
        quads.push(RawQuad {
            subject: s as usize,
            relation: r as usize,
            object: o as usize,
            raw_time: t,
        });
    }
    Ok(quads)
}

/// Lines `name<TAB>id`; ids must form a dense 0..n range.
fn read_id_map(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, id_str) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
            file: path.to_path_buf(),
            line: lineno + 1,
            msg: "expected `name<TAB>id`".into(),
        })?;
        let id: usize = id_str.trim().parse().map_err(|_| Error::Parse {
            file: path.to_path_buf(),
            line: lineno + 1,
            msg: format!("non-integer id `{}`", id_str),
        })?;
        pairs.push((id, name.to_string()));
    }
    pairs.sort_by_key(|(id, _)| *id);
    for (expect, (id, _)) in pairs.iter().enumerate() {
        if *id != expect {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: 0,
                msg: format!("ids are not dense: expected {}, found {}", expect, id),
            });
        }
    }
    Ok(pairs.into_iter().map(|(_, n)| n).collect())
}

fn parse_count(path: &Path, s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse {
        file: path.to_path_buf(),
        line: 1,
        msg: format!("non-integer count `{}`", s),
    })
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Write a bundle as a loadable dataset directory (used by test fixtures and
/// the synthetic data generators).
pub fn write_dataset_dir(bundle: &DatasetBundle, dir: &Path) -> Result<PathBuf> {
    let out = dir.join(&bundle.name);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    bundle.train.write_quadruple_file(&out.join("train.txt"))?;
    bundle.valid.write_quadruple_file(&out.join("valid.txt"))?;
    bundle.test.write_quadruple_file(&out.join("test.txt"))?;
    let id_map_file = |names: &[String], path: &Path| -> Result<()> {
        let mut text = String::new();
        for (i, n) in names.iter().enumerate() {
            writeln!(text, "{}\t{}", n, i).expect("string write");
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    };
    id_map_file(
        &bundle.train.id_maps.entity_names,
        &out.join("entity2id.txt"),
    )?;
    id_map_file(
        &bundle.train.id_maps.relation_names,
        &out.join("relation2id.txt"),
    )?;
    Ok(out)
}
