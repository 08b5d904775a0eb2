//! Dataset manifests: JSON Lines loading, per-dataset statistics, the
//! seeded train/validation split and integration of per-scenario datasets.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{round_half_away, Annotation, Sample, ScenarioLabel};
use crate::error::{Error, Result};

/// Name of the generator recorded next to split outputs.
pub const SPLIT_PRNG: &str = "chacha8-fisher-yates";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let m = DatasetManifest {
            name: name.into(),
            samples,
        };
        m.check_unique_ids()?;
        Ok(m)
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateSampleId(s.id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The common scenario of all samples, if there is one.
    pub fn scenario(&self) -> Option<ScenarioLabel> {
        let first = self.samples.first()?.scenario;
        self.samples
            .iter()
            .all(|s| s.scenario == first)
            .then_some(first)
    }

    pub fn counts(&self) -> Vec<u64> {
        self.samples.iter().map(Sample::count).collect()
    }

    /// Serializes to JSON Lines, one sample per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

/// Reads a JSON Lines manifest. The manifest is named after the file stem.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".to_string());
    parse_manifest(&name, path, &text)
}

/// Parses manifest text; `origin` only appears in error messages.
pub fn parse_manifest(name: &str, origin: &Path, text: &str) -> Result<DatasetManifest> {
    let err = |line: usize, message: String| Error::Manifest {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| err(line, e.to_string()))?;
        if let Some(ty) = value
            .get("annotation")
            .and_then(|a| a.get("type"))
            .and_then(|t| t.as_str())
        {
            if !Annotation::TYPE_TAGS.contains(&ty) {
                return Err(err(
                    line,
                    Error::UnknownAnnotation(ty.to_string()).to_string(),
                ));
            }
        }
        let sample: Sample = serde_json::from_value(value).map_err(|e| err(line, e.to_string()))?;
        sample.validate().map_err(|e| err(line, e.to_string()))?;
        if !seen.insert(sample.id.clone()) {
            return Err(err(line, Error::DuplicateSampleId(sample.id).to_string()));
        }
        samples.push(sample);
    }
    Ok(DatasetManifest {
        name: name.to_string(),
        samples,
    })
}

/// Scale and person-count extremes of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub scale: usize,
    pub max_persons: u64,
    pub min_persons: u64,
    pub avg_persons: f64,
}

pub fn compute_statistics(m: &DatasetManifest) -> Result<DatasetStats> {
    let counts = m.counts();
    let (Some(&max), Some(&min)) = (counts.iter().max(), counts.iter().min()) else {
        return Err(Error::EmptyManifest(m.name.clone()));
    };
    let total: u64 = counts.iter().sum();
    Ok(DatasetStats {
        name: m.name.clone(),
        scale: counts.len(),
        max_persons: max,
        min_persons: min,
        avg_persons: total as f64 / counts.len() as f64,
    })
}

const STATS_HEADER: [&str; 5] = ["Dataset", "Scale", "Max.", "Min.", "Avg."];

/// Fixed-width text table with averages shown to one decimal.
pub fn format_stats_table(rows: &[DatasetStats]) -> String {
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.name.clone(),
                r.scale.to_string(),
                r.max_persons.to_string(),
                r.min_persons.to_string(),
                format!("{:.1}", r.avg_persons),
            ]
        })
        .collect();
    let mut widths = STATS_HEADER.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut emit = |row: &[String]| {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join(" | "));
    };
    emit(&STATS_HEADER.map(String::from));
    for row in &cells {
        emit(row);
    }
    out
}

pub fn format_stats_csv(rows: &[DatasetStats]) -> String {
    let mut out = STATS_HEADER.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.1}",
            r.name, r.scale, r.max_persons, r.min_persons, r.avg_persons
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "train fraction {train_fraction} must lie strictly between 0 and 1"
            )));
        }
        Ok(SplitSpec {
            train_fraction,
            seed,
        })
    }

    /// The 8:2 split.
    pub fn eight_two(seed: u64) -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed,
        }
    }

    /// Validation size for `n` samples.
    pub fn val_len(&self, n: usize) -> usize {
        round_half_away((1.0 - self.train_fraction) * n as f64) as usize
    }
}

/// Provenance written next to split outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetadata {
    pub prng: String,
    pub seed: u64,
    pub train_fraction: f64,
    pub source: String,
    pub train: usize,
    pub val: usize,
}

/// Seeded split. Membership depends only on the set of sample ids and the
/// seed: ids are sorted, shuffled with ChaCha8, and the first
/// `n - val_len(n)` become the training set. Both halves keep the order of
/// the input manifest.
pub fn split_dataset(
    m: &DatasetManifest,
    spec: &SplitSpec,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let spec = SplitSpec::new(spec.train_fraction, spec.seed)?;
    let n = m.samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mut ids: Vec<&str> = m.samples.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let n_train = n - spec.val_len(n);
    let train_ids: HashSet<&str> = ids[..n_train].iter().copied().collect();

    let (train, val): (Vec<Sample>, Vec<Sample>) = m
        .samples
        .iter()
        .cloned()
        .partition(|s| train_ids.contains(s.id.as_str()));
    Ok((
        DatasetManifest {
            name: format!("{}-train", m.name),
            samples: train,
        },
        DatasetManifest {
            name: format!("{}-val", m.name),
            samples: val,
        },
    ))
}

pub fn split_metadata(
    m: &DatasetManifest,
    spec: &SplitSpec,
    train: usize,
    val: usize,
) -> SplitMetadata {
    SplitMetadata {
        prng: SPLIT_PRNG.to_string(),
        seed: spec.seed,
        train_fraction: spec.train_fraction,
        source: m.name.clone(),
        train,
        val,
    }
}

/// Concatenates per-scenario manifests, keeping every sample's label.
///
/// Ids are kept as they are when globally unique; otherwise every id is
/// prefixed with `<manifest name>/`. Apply this per subset, after splitting,
/// so the integrated split is the union of the per-dataset splits.
pub fn integrate(ms: &[DatasetManifest]) -> Result<DatasetManifest> {
    let mut seen = HashSet::new();
    let collide = ms
        .iter()
        .flat_map(|m| &m.samples)
        .any(|s| !seen.insert(s.id.as_str()));
    let samples: Vec<Sample> = ms
        .iter()
        .flat_map(|m| {
            m.samples.iter().map(move |s| {
                let mut s = s.clone();
                if collide {
                    s.id = format!("{}/{}", m.name, s.id);
                }
                s
            })
        })
        .collect();
    DatasetManifest::new("integrated", samples)
}

/// Resolves a sample's image path against the manifest's directory.
pub fn resolve_image(manifest_path: &Path, sample: &Sample) -> PathBuf {
    let p = Path::new(&sample.image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Annotation;

    fn sample(id: &str, scenario: ScenarioLabel, count: u64) -> Sample {
        Sample {
            id: id.to_string(),
            image: format!("{id}.jpg"),
            scenario,
            annotation: Annotation::CountOnly(count),
            width: None,
            height: None,
        }
    }

    fn manifest(name: &str, scenario: ScenarioLabel, n: usize) -> DatasetManifest {
        let samples = (0..n)
            .map(|i| sample(&format!("{name}-{i:05}"), scenario, i as u64 % 7))
            .collect();
        DatasetManifest::new(name, samples).unwrap()
    }

    const THREE_LINES: &str = r#"{"id": "a", "image": "a.jpg", "scenario": "side-view", "annotation": {"type": "body_boxes", "data": [[0, 0, 10, 20], [5, 5, 8, 9]]}}
{"id": "b", "image": "b.jpg", "scenario": "top-view", "annotation": {"type": "head_boxes", "data": []}}
{"id": "c", "image": "c.jpg", "scenario": "crowd", "annotation": {"type": "head_dots", "data": [[1.5, 2.5]]}}
"#;

    #[test]
    fn parses_three_lines_in_order() {
        let m = parse_manifest("m", Path::new("m.jsonl"), THREE_LINES).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.samples[0].id, "a");
        assert_eq!(m.samples[2].scenario, ScenarioLabel::Crowd);
        assert_eq!(m.counts(), vec![2, 0, 1]);
    }

    #[test]
    fn count_annotation_parses() {
        let line = r#"{"id": "x", "image": "x.jpg", "scenario": "crowd", "annotation": {"type": "count", "data": 34}}"#;
        let m = parse_manifest("m", Path::new("m.jsonl"), line).unwrap();
        assert_eq!(m.samples[0].count(), 34);
    }

    #[test]
    fn trailing_space_in_scenario_is_an_error_at_that_line() {
        let text = THREE_LINES.replacen("\"top-view\"", "\"sideview \"", 1);
        let err = parse_manifest("m", Path::new("m.jsonl"), &text).unwrap_err();
        match err {
            Error::Manifest { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_annotation_type_is_named() {
        let line = r#"{"id": "x", "image": "x.jpg", "scenario": "crowd", "annotation": {"type": "polygons", "data": []}}"#;
        let err = parse_manifest("m", Path::new("m.jsonl"), line).unwrap_err();
        assert!(err.to_string().contains("polygons"), "{err}");
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = format!("{}\n{{not json\n", THREE_LINES.lines().next().unwrap());
        let err = parse_manifest("m", Path::new("m.jsonl"), &text).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }));
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let m = parse_manifest("m", Path::new("m.jsonl"), "").unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = format!("{0}\n{0}\n", THREE_LINES.lines().next().unwrap());
        assert!(parse_manifest("m", Path::new("m.jsonl"), &text).is_err());
    }

    #[test]
    fn load_from_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("side.jsonl");
        std::fs::write(&path, THREE_LINES).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.name, "side");
        let again = dir.path().join("again.jsonl");
        m.write(&again).unwrap();
        assert_eq!(load_manifest(&again).unwrap().samples, m.samples);
    }

    #[test]
    fn statistics_hand_arithmetic() {
        let m = DatasetManifest::new(
            "d",
            vec![
                sample("a", ScenarioLabel::SideView, 0),
                sample("b", ScenarioLabel::SideView, 3),
                sample("c", ScenarioLabel::SideView, 7),
            ],
        )
        .unwrap();
        let s = compute_statistics(&m).unwrap();
        assert_eq!((s.scale, s.max_persons, s.min_persons), (3, 7, 0));
        assert!((s.avg_persons - 10.0 / 3.0).abs() < 1e-12);
        assert!(format_stats_table(std::slice::from_ref(&s)).contains("3.3"));
        assert!(format_stats_csv(&[s]).ends_with("d,3,7,0,3.3\n"));
    }

    #[test]
    fn statistics_singleton_and_empty() {
        let m = DatasetManifest::new("d", vec![sample("a", ScenarioLabel::Crowd, 5)]).unwrap();
        let s = compute_statistics(&m).unwrap();
        assert_eq!((s.scale, s.max_persons, s.min_persons), (1, 5, 5));
        assert_eq!(format!("{:.1}", s.avg_persons), "5.0");
        let empty = DatasetManifest::new("e", vec![]).unwrap();
        assert!(matches!(
            compute_statistics(&empty),
            Err(Error::EmptyManifest(_))
        ));
    }

    #[test]
    fn table_layout_matches_report_golden() {
        let row = DatasetStats {
            name: "Side-View".into(),
            scale: 5648,
            max_persons: 70,
            min_persons: 0,
            avg_persons: 6.6,
        };
        let text = format_stats_table(&[row]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "Dataset   | Scale | Max. | Min. | Avg.");
        assert_eq!(lines[1], "Side-View |  5648 |   70 |    0 |  6.6");
    }

    #[test]
    fn ten_samples_split_eight_two() {
        let m = manifest("m", ScenarioLabel::SideView, 10);
        let (train, val) = split_dataset(&m, &SplitSpec::eight_two(1)).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
    }

    #[test]
    fn split_is_deterministic_and_order_free() {
        let m = manifest("m", ScenarioLabel::SideView, 101);
        let spec = SplitSpec::eight_two(42);
        let a = split_dataset(&m, &spec).unwrap();
        let b = split_dataset(&m, &spec).unwrap();
        assert_eq!(a, b);

        let mut reversed = m.clone();
        reversed.samples.reverse();
        let (_, val_rev) = split_dataset(&reversed, &spec).unwrap();
        let ids = |m: &DatasetManifest| {
            let mut v: Vec<String> = m.samples.iter().map(|s| s.id.clone()).collect();
            v.sort();
            v
        };
        assert_eq!(ids(&a.1), ids(&val_rev));

        let (_, other) = split_dataset(&m, &SplitSpec::eight_two(43)).unwrap();
        assert_ne!(ids(&a.1), ids(&other));
    }

    #[test]
    fn split_rejects_tiny_and_bad_fraction() {
        let m = manifest("m", ScenarioLabel::SideView, 1);
        assert!(matches!(
            split_dataset(&m, &SplitSpec::eight_two(0)),
            Err(Error::TooFewSamples(1))
        ));
        assert!(SplitSpec::new(1.0, 0).is_err());
        assert!(SplitSpec::new(0.0, 0).is_err());
    }

    #[test]
    fn integrate_concatenates_and_keeps_labels() {
        let a = manifest("a", ScenarioLabel::SideView, 2);
        let b = manifest("b", ScenarioLabel::Crowd, 3);
        let m = integrate(&[a.clone(), b]).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.samples[0].scenario, ScenarioLabel::SideView);
        assert_eq!(m.samples[4].scenario, ScenarioLabel::Crowd);
        assert_eq!(m.scenario(), None);
        // identity, ids untouched when unique
        assert_eq!(integrate(std::slice::from_ref(&a)).unwrap().samples, a.samples);
    }

    #[test]
    fn integrate_prefixes_colliding_ids() {
        let a = DatasetManifest::new("a", vec![sample("x", ScenarioLabel::SideView, 1)]).unwrap();
        let b = DatasetManifest::new("b", vec![sample("x", ScenarioLabel::TopView, 2)]).unwrap();
        let m = integrate(&[a.clone(), b]).unwrap();
        assert_eq!(m.samples[0].id, "a/x");
        assert_eq!(m.samples[1].id, "b/x");
        // still colliding after prefixing
        assert!(matches!(
            integrate(&[a.clone(), a]),
            Err(Error::DuplicateSampleId(_))
        ));
    }

    #[test]
    fn integrated_scale_of_five_datasets() {
        let sizes = [5648, 5305, 4632, 5904, 4834];
        let ms: Vec<DatasetManifest> = ScenarioLabel::ALL
            .iter()
            .zip(sizes)
            .map(|(l, n)| manifest(l.tag(), *l, n))
            .collect();
        let m = integrate(&ms).unwrap();
        assert_eq!(compute_statistics(&m).unwrap().scale, 26323);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use crate::domain::Annotation;
    use proptest::prelude::*;

    fn build(name: &str, counts: &[u64], scenario: ScenarioLabel) -> DatasetManifest {
        let samples = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| Sample {
                id: format!("{name}{i}"),
                image: String::new(),
                scenario,
                annotation: Annotation::CountOnly(c),
                width: None,
                height: None,
            })
            .collect();
        DatasetManifest::new(name, samples).unwrap()
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..300, seed in any::<u64>()) {
            let m = build("s", &vec![1; n], ScenarioLabel::LongShot);
            let (train, val) = split_dataset(&m, &SplitSpec::eight_two(seed)).unwrap();
            prop_assert_eq!(train.len() + val.len(), n);
            prop_assert_eq!(val.len(), (0.2 * n as f64).round() as usize);
            let t: HashSet<_> = train.samples.iter().map(|s| &s.id).collect();
            prop_assert!(val.samples.iter().all(|s| !t.contains(&s.id)));
        }

        #[test]
        fn integrated_statistics_compose(
            a in prop::collection::vec(0u64..500, 1..40),
            b in prop::collection::vec(0u64..500, 1..40),
        ) {
            let ma = build("a", &a, ScenarioLabel::SideView);
            let mb = build("b", &b, ScenarioLabel::Crowd);
            let sa = compute_statistics(&ma).unwrap();
            let sb = compute_statistics(&mb).unwrap();
            let si = compute_statistics(&integrate(&[ma, mb]).unwrap()).unwrap();
            prop_assert_eq!(si.scale, sa.scale + sb.scale);
            prop_assert_eq!(si.max_persons, sa.max_persons.max(sb.max_persons));
            prop_assert_eq!(si.min_persons, sa.min_persons.min(sb.min_persons));
            let weighted = (sa.avg_persons * sa.scale as f64 + sb.avg_persons * sb.scale as f64)
                / (sa.scale + sb.scale) as f64;
            prop_assert!((si.avg_persons - weighted).abs() < 1e-9);
        }
    }
}
