//! Corpus catalog, device selection and leakage-free train/test splits.
//!
//! The catalog is a CSV with one row per video. Social-media versions point
//! at their native parent through `parent_id`; a split always keeps a native
//! video and all of its versions on the same side.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frames::{wrap_csv, Scenario, Version, VideoDescriptor};
use crate::util::{derive_seed, write_file};
use crate::{Error, Result};

/// Native videos a single-instance device needs, each shared on both
/// platforms, to be selected.
pub const MIN_SHARED_NATIVES: usize = 18;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.55;
pub const DEFAULT_MAX_RETRIES: usize = 100;
/// Models dropped regardless of the selection criteria.
pub const DEFAULT_EXCLUSIONS: &[&str] = &["Asus Zenfone 2 Laser"];
const MAX_REPORTED_VIOLATIONS: usize = 10;

/// One row of the catalog CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub video_id: String,
    pub device_id: String,
    pub brand: String,
    pub model: String,
    pub instance: String,
    pub scenario: Scenario,
    pub version: Version,
    pub parent_id: Option<String>,
    pub path: PathBuf,
    pub frames: Option<usize>,
    pub fps: Option<f64>,
    pub duration: Option<f64>,
}

impl CatalogEntry {
    pub fn descriptor(&self) -> VideoDescriptor {
        VideoDescriptor {
            video_id: self.video_id.clone(),
            path: self.path.clone(),
            device_id: self.device_id.clone(),
            scenario: self.scenario,
            version: self.version,
            total_frames: self.frames,
            fps: self.fps,
            duration: self.duration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceInfo {
    pub device_id: String,
    pub brand: String,
    pub model: String,
    pub instance: String,
}

/// Validated set of videos with native/social linkage.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoCatalog {
    entries: Vec<CatalogEntry>,
    by_id: HashMap<String, usize>,
    children: HashMap<String, Vec<usize>>,
}

impl VideoCatalog {
    pub fn new(mut entries: Vec<CatalogEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        let mut by_id = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if by_id.insert(e.video_id.clone(), i).is_some() {
                return Err(Error::Dataset(format!("duplicate video_id {}", e.video_id)));
            }
        }
        let mut devices: HashMap<&str, (&str, &str, &str)> = HashMap::new();
        let mut children: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            let info = (e.brand.as_str(), e.model.as_str(), e.instance.as_str());
            if let Some(prev) = devices.insert(&e.device_id, info) {
                if prev != info {
                    return Err(Error::Dataset(format!("device {} has inconsistent brand/model/instance", e.device_id)));
                }
            }
            match (e.version, &e.parent_id) {
                (Version::Native, None) => {}
                (Version::Native, Some(_)) => {
                    return Err(Error::Dataset(format!("native video {} must not have a parent", e.video_id)));
                }
                (_, None) => {
                    return Err(Error::Dataset(format!("{} video {} has no native parent", e.version, e.video_id)));
                }
                (_, Some(parent)) => {
                    let p = by_id
                        .get(parent)
                        .map(|&j| &entries[j])
                        .ok_or_else(|| Error::Dataset(format!("video {} links to unknown parent {parent}", e.video_id)))?;
                    if p.version != Version::Native {
                        return Err(Error::Dataset(format!("parent {parent} of {} is not native", e.video_id)));
                    }
                    if p.device_id != e.device_id || p.scenario != e.scenario {
                        return Err(Error::Dataset(format!(
                            "video {} differs from its parent {parent} in device or scenario",
                            e.video_id
                        )));
                    }
                    children.entry(parent.clone()).or_default().push(i);
                }
            }
        }
        Ok(VideoCatalog { entries, by_id, children })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| wrap_csv(path, e))?;
        let mut rows: Vec<CatalogEntry> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        let base = path.parent().unwrap_or(Path::new(""));
        for row in &mut rows {
            if row.path.is_relative() {
                row.path = base.join(&row.path);
            }
        }
        Self::new(rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| wrap_csv(path, e))?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn get(&self, video_id: &str) -> Option<&CatalogEntry> {
        self.by_id.get(video_id).map(|&i| &self.entries[i])
    }

    /// Social versions of a native video, in id order.
    pub fn versions_of(&self, native_id: &str) -> Vec<&CatalogEntry> {
        self.children
            .get(native_id)
            .map(|v| v.iter().map(|&i| &self.entries[i]).collect())
            .unwrap_or_default()
    }

    pub fn natives(&self, device_id: &str) -> Vec<&CatalogEntry> {
        self.entries
            .iter()
            .filter(|e| e.device_id == device_id && e.version == Version::Native)
            .collect()
    }

    pub fn devices(&self) -> Vec<DeviceInfo> {
        let mut seen = BTreeMap::new();
        for e in &self.entries {
            seen.entry(e.device_id.clone()).or_insert_with(|| DeviceInfo {
                device_id: e.device_id.clone(),
                brand: e.brand.clone(),
                model: e.model.clone(),
                instance: e.instance.clone(),
            });
        }
        seen.into_values().collect()
    }
}

/// Selected devices; a device's label is its position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceCatalog {
    pub devices: Vec<DeviceInfo>,
}

impl DeviceCatalog {
    pub fn new(mut devices: Vec<DeviceInfo>) -> Result<Self> {
        devices.sort_by(|a, b| a.device_id.cmp(&b.device_id));
        if let Some(w) = devices.windows(2).find(|w| w[0].device_id == w[1].device_id) {
            return Err(Error::Dataset(format!("duplicate device {}", w[0].device_id)));
        }
        Ok(DeviceCatalog { devices })
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn label_of(&self, device_id: &str) -> Option<usize> {
        self.devices.binary_search_by(|d| d.device_id.as_str().cmp(device_id)).ok()
    }

    pub fn classes(&self) -> Vec<String> {
        self.devices.iter().map(|d| d.device_id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceAudit {
    pub device_id: String,
    pub brand: String,
    pub model: String,
    pub native_videos: usize,
    pub shared_on_both: usize,
    pub same_model_devices: usize,
    pub enough_shared_natives: bool,
    pub multiple_instances: bool,
    pub excluded: bool,
    pub kept: bool,
}

impl DeviceAudit {
    pub fn reason(&self) -> &'static str {
        match (self.excluded, self.enough_shared_natives, self.multiple_instances) {
            (true, _, _) => "excluded by list",
            (false, true, true) => "both criteria",
            (false, true, false) => "enough shared native videos",
            (false, false, true) => "multiple instances of model",
            (false, false, false) => "no criterion met",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub devices: DeviceCatalog,
    pub audit: Vec<DeviceAudit>,
}

impl SelectionReport {
    pub fn write_audit_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| wrap_csv(path, e))?;
        w.write_record([
            "device_id",
            "brand",
            "model",
            "native_videos",
            "shared_on_both",
            "same_model_devices",
            "enough_shared_natives",
            "multiple_instances",
            "excluded",
            "kept",
            "reason",
        ])?;
        for a in &self.audit {
            w.write_record([
                a.device_id.clone(),
                a.brand.clone(),
                a.model.clone(),
                a.native_videos.to_string(),
                a.shared_on_both.to_string(),
                a.same_model_devices.to_string(),
                a.enough_shared_natives.to_string(),
                a.multiple_instances.to_string(),
                a.excluded.to_string(),
                a.kept.to_string(),
                a.reason().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn normalize(s: &str) -> String {
    s.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

/// Keeps a device if it has enough natives shared on both platforms or if
/// another device of the same brand and model exists. `exclusions` match a
/// device id or a "brand model" name, ignoring case and punctuation.
pub fn select_devices(catalog: &VideoCatalog, exclusions: &[String]) -> SelectionReport {
    let devices = catalog.devices();
    let excluded: BTreeSet<String> = exclusions.iter().map(|s| normalize(s)).collect();
    let mut per_model: HashMap<String, usize> = HashMap::new();
    for d in &devices {
        *per_model.entry(normalize(&format!("{}{}", d.brand, d.model))).or_default() += 1;
    }

    let mut audit = Vec::new();
    let mut kept = Vec::new();
    for d in devices {
        let natives = catalog.natives(&d.device_id);
        let shared_on_both = natives
            .iter()
            .filter(|n| {
                let versions: BTreeSet<Version> = catalog.versions_of(&n.video_id).iter().map(|v| v.version).collect();
                versions.contains(&Version::Whatsapp) && versions.contains(&Version::Youtube)
            })
            .count();
        let model_key = normalize(&format!("{}{}", d.brand, d.model));
        let same_model_devices = per_model[&model_key];
        let is_excluded = excluded.contains(&model_key) || excluded.contains(&normalize(&d.device_id));
        let enough = shared_on_both >= MIN_SHARED_NATIVES;
        let multi = same_model_devices > 1;
        let keep = !is_excluded && (enough || multi);
        audit.push(DeviceAudit {
            device_id: d.device_id.clone(),
            brand: d.brand.clone(),
            model: d.model.clone(),
            native_videos: natives.len(),
            shared_on_both,
            same_model_devices,
            enough_shared_natives: enough,
            multiple_instances: multi,
            excluded: is_excluded,
            kept: keep,
        });
        if keep {
            kept.push(d);
        }
    }
    SelectionReport {
        devices: DeviceCatalog::new(kept).expect("catalog device ids are unique"),
        audit,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Train,
    Test,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Train => "train",
            Side::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: DEFAULT_TRAIN_FRACTION,
            seed: 0,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }
}

/// One row of the split CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub video_id: String,
    pub device_id: String,
    pub label: usize,
    pub scenario: Scenario,
    pub version: Version,
    pub parent_id: Option<String>,
    pub side: Side,
    pub path: PathBuf,
}

impl SplitRow {
    /// The native video this row belongs to.
    pub fn native_id(&self) -> &str {
        self.parent_id.as_deref().unwrap_or(&self.video_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSplit {
    pub device_id: String,
    pub label: usize,
    /// Natives eligible for the split.
    pub native_available: usize,
    /// Natives left out because a social version is missing.
    pub native_incomplete: usize,
    pub native_train: usize,
    pub native_test: usize,
    pub videos_train: usize,
    pub videos_test: usize,
    /// Whether rejection sampling gave up and the constrained assignment
    /// was used.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub format_version: u32,
    pub seed: u64,
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub max_retries: usize,
    pub required_versions: Vec<Version>,
    pub min_native: usize,
    pub native_train: usize,
    pub native_test: usize,
    pub classes: Vec<String>,
    pub devices: Vec<DeviceSplit>,
    /// Invocation that produced the split, filled in by the caller.
    #[serde(default)]
    pub run_config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub rows: Vec<SplitRow>,
    pub meta: Option<SplitMeta>,
}

impl SplitManifest {
    pub fn side(&self, side: Side) -> impl Iterator<Item = &SplitRow> {
        self.rows.iter().filter(move |r| r.side == side)
    }

    /// Device ids indexed by label.
    pub fn classes(&self) -> Vec<String> {
        if let Some(meta) = &self.meta {
            return meta.classes.clone();
        }
        let mut by_label = BTreeMap::new();
        for r in &self.rows {
            by_label.entry(r.label).or_insert_with(|| r.device_id.clone());
        }
        by_label.into_values().collect()
    }

    fn meta_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    /// Writes the CSV and, next to it, the metadata as JSON.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path).map_err(|e| wrap_csv(csv_path, e))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(csv_path, e))?;
        if let Some(meta) = &self.meta {
            let mut json = serde_json::to_vec_pretty(meta)?;
            json.push(b'\n');
            write_file(&Self::meta_path(csv_path), &json)?;
        }
        Ok(())
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(csv_path).map_err(|e| wrap_csv(csv_path, e))?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<SplitRow>, _>>()?;
        let meta_path = Self::meta_path(csv_path);
        let meta = if meta_path.is_file() {
            let text = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            Some(serde_json::from_slice(&text)?)
        } else {
            None
        };
        Ok(SplitManifest { rows, meta })
    }
}

fn covers_all_scenarios(natives: &[&CatalogEntry]) -> bool {
    Scenario::ALL.iter().all(|s| natives.iter().any(|n| n.scenario == *s))
}

/// Deterministic fallback: one video per scenario on each side first, then
/// the remainder at random.
fn constrained_assignment<'a>(
    shuffled: &[&'a CatalogEntry],
    n_train: usize,
    n_test: usize,
) -> Option<(Vec<&'a CatalogEntry>, Vec<&'a CatalogEntry>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut used = vec![false; shuffled.len()];
    for s in Scenario::ALL {
        let mut of_scenario = shuffled.iter().enumerate().filter(|(_, n)| n.scenario == s);
        let (i, a) = of_scenario.next()?;
        let (j, b) = of_scenario.next()?;
        train.push(*a);
        test.push(*b);
        used[i] = true;
        used[j] = true;
    }
    let mut rest = shuffled.iter().zip(&used).filter(|(_, u)| !**u).map(|(n, _)| *n);
    while train.len() < n_train {
        train.push(rest.next()?);
    }
    while test.len() < n_test {
        test.push(rest.next()?);
    }
    Some((train, test))
}

/// Balanced per-device split of native videos, with every social version
/// following its parent.
///
/// Natives missing a social version that occurs elsewhere in the catalog are
/// left out. `M` is the smallest eligible native count among the devices; each device
/// contributes `round(fraction·M)` native training videos and the rest of `M`
/// as test videos, drawn at random until every scenario appears on both
/// sides.
pub fn build_split(devices: &DeviceCatalog, catalog: &VideoCatalog, config: &SplitConfig) -> Result<SplitManifest> {
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("train fraction {} not in (0, 1)", config.train_fraction)));
    }
    if devices.is_empty() {
        return Err(Error::Dataset("no devices selected".into()));
    }
    // A native joins the split only with every social version the catalog
    // knows of, so each picked native contributes the same number of videos.
    let required: BTreeSet<Version> = catalog
        .entries()
        .iter()
        .map(|e| e.version)
        .filter(|v| *v != Version::Native)
        .collect();
    let mut natives_by_device = Vec::new();
    let mut incomplete = Vec::new();
    for d in &devices.devices {
        let all = catalog.natives(&d.device_id);
        let total = all.len();
        let natives: Vec<&CatalogEntry> = all
            .into_iter()
            .filter(|n| {
                let have: BTreeSet<Version> = catalog.versions_of(&n.video_id).iter().map(|v| v.version).collect();
                required.is_subset(&have)
            })
            .collect();
        incomplete.push(total - natives.len());
        for s in Scenario::ALL {
            if !natives.iter().any(|n| n.scenario == s) {
                return Err(Error::Dataset(format!("device {} has no eligible native {s} video", d.device_id)));
            }
        }
        natives_by_device.push(natives);
    }
    let min_native = natives_by_device.iter().map(Vec::len).min().unwrap_or(0);
    let n_train = (config.train_fraction * min_native as f64).round() as usize;
    let n_test = min_native - n_train;
    let needed = Scenario::ALL.len();
    if n_train < needed || n_test < needed {
        return Err(Error::Dataset(format!(
            "smallest device has {min_native} native videos, giving {n_train}/{n_test}; \
             each side needs at least {needed} to cover every scenario"
        )));
    }

    let mut rows = Vec::new();
    let mut per_device = Vec::new();
    for (label, (device, natives)) in devices.devices.iter().zip(&natives_by_device).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, label as u64));
        let mut order = natives.clone();
        let mut chosen = None;
        for _ in 0..config.max_retries {
            order.shuffle(&mut rng);
            let (train, rest) = order.split_at(n_train);
            let test = &rest[..n_test];
            if covers_all_scenarios(train) && covers_all_scenarios(test) {
                chosen = Some((train.to_vec(), test.to_vec()));
                break;
            }
        }
        let fallback = chosen.is_none();
        let (train, test) = match chosen {
            Some(c) => c,
            None => {
                order.shuffle(&mut rng);
                constrained_assignment(&order, n_train, n_test).ok_or_else(|| {
                    Error::Dataset(format!(
                        "device {} cannot place every scenario on both sides",
                        device.device_id
                    ))
                })?
            }
        };

        let mut counts = [0usize; 2];
        for (side, picked) in [(Side::Train, &train), (Side::Test, &test)] {
            for native in picked.iter() {
                let family = std::iter::once(*native).chain(catalog.versions_of(&native.video_id));
                for e in family {
                    counts[side as usize] += 1;
                    rows.push(SplitRow {
                        video_id: e.video_id.clone(),
                        device_id: e.device_id.clone(),
                        label,
                        scenario: e.scenario,
                        version: e.version,
                        parent_id: e.parent_id.clone(),
                        side,
                        path: e.path.clone(),
                    });
                }
            }
        }
        per_device.push(DeviceSplit {
            device_id: device.device_id.clone(),
            label,
            native_available: natives.len(),
            native_incomplete: incomplete[label],
            native_train: n_train,
            native_test: n_test,
            videos_train: counts[0],
            videos_test: counts[1],
            fallback,
        });
        if fallback {
            log::warn!("device {}: scenario coverage needed the constrained assignment", device.device_id);
        }
    }
    rows.sort_by(|a, b| {
        (a.label, a.side, a.native_id(), a.version).cmp(&(b.label, b.side, b.native_id(), b.version))
    });

    Ok(SplitManifest {
        rows,
        meta: Some(SplitMeta {
            format_version: 1,
            seed: config.seed,
            train_fraction: config.train_fraction,
            test_fraction: ((1.0 - config.train_fraction) * 1e9).round() / 1e9,
            max_retries: config.max_retries,
            required_versions: required.into_iter().collect(),
            min_native,
            native_train: n_train,
            native_test: n_test,
            classes: devices.classes(),
            devices: per_device,
            run_config: serde_json::Value::Null,
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    Duplicate,
    Label,
    Pairing,
    Scenario,
    Balance,
    Coverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub check: Check,
    pub device_id: String,
    pub video_id: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:?}] device {}", self.check, self.device_id)?;
        if let Some(v) = &self.video_id {
            write!(f, " video {v}")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub rows: usize,
    pub devices: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn checks_failed(&self) -> BTreeSet<Check> {
        self.violations.iter().map(|v| v.check).collect()
    }

    /// `Err` listing the first ten violations when the audit is not clean.
    pub fn into_result(self) -> Result<Self> {
        if self.is_clean() {
            return Ok(self);
        }
        let details = self
            .violations
            .iter()
            .take(MAX_REPORTED_VIOLATIONS)
            .map(|v| format!("  {v}"))
            .collect::<Vec<_>>()
            .join("\n");
        Err(Error::Audit {
            count: self.violations.len(),
            details,
        })
    }
}

fn most_common(counts: &BTreeMap<&str, usize>) -> usize {
    let mut freq: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in counts.values() {
        *freq.entry(c).or_default() += 1;
    }
    freq.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map_or(0, |(&c, _)| c)
}

/// Checks pairing, balance, scenario coverage and consistency of a split.
pub fn validate_manifest(rows: &[SplitRow]) -> AuditReport {
    let mut violations = Vec::new();
    let mut push = |check, device_id: &str, video_id: Option<&str>, message: String| {
        violations.push(Violation {
            check,
            device_id: device_id.to_string(),
            video_id: video_id.map(str::to_string),
            message,
        })
    };

    let mut by_id: HashMap<&str, &SplitRow> = HashMap::new();
    for r in rows {
        if by_id.contains_key(r.video_id.as_str()) {
            push(Check::Duplicate, &r.device_id, Some(&r.video_id), "video listed more than once".into());
        } else {
            by_id.insert(&r.video_id, r);
        }
    }

    let mut labels: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for r in rows {
        labels.entry(&r.device_id).or_default().insert(r.label);
    }
    let mut owners: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    for r in rows {
        owners.entry(r.label).or_default().insert(&r.device_id);
    }
    for (device, set) in &labels {
        if set.len() > 1 {
            push(Check::Label, device, None, format!("device carries several labels {set:?}"));
        }
    }
    for (label, set) in &owners {
        if set.len() > 1 {
            let first = set.iter().next().copied().unwrap_or_default();
            push(Check::Label, first, None, format!("label {label} shared by devices {set:?}"));
        }
    }

    for r in rows {
        match (r.version, &r.parent_id) {
            (Version::Native, None) => {}
            (Version::Native, Some(p)) => {
                push(Check::Pairing, &r.device_id, Some(&r.video_id), format!("native video has parent {p}"));
            }
            (_, None) => push(Check::Pairing, &r.device_id, Some(&r.video_id), "social video without parent".into()),
            (_, Some(p)) => match by_id.get(p.as_str()) {
                None => push(Check::Pairing, &r.device_id, Some(&r.video_id), format!("parent {p} not in manifest")),
                Some(parent) => {
                    if parent.side != r.side {
                        push(
                            Check::Pairing,
                            &r.device_id,
                            Some(&r.video_id),
                            format!("on {} side but parent {p} is on {} side", r.side, parent.side),
                        );
                    }
                    if parent.scenario != r.scenario {
                        push(
                            Check::Scenario,
                            &r.device_id,
                            Some(&r.video_id),
                            format!("scenario {} differs from parent's {}", r.scenario, parent.scenario),
                        );
                    }
                }
            },
        }
    }

    let devices: BTreeSet<&str> = rows.iter().map(|r| r.device_id.as_str()).collect();
    for side in [Side::Train, Side::Test] {
        let mut native_counts: BTreeMap<&str, usize> = devices.iter().map(|d| (*d, 0)).collect();
        let mut scenarios: BTreeMap<&str, BTreeSet<Scenario>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.side == side && r.version == Version::Native) {
            *native_counts.get_mut(r.device_id.as_str()).expect("device listed") += 1;
            scenarios.entry(&r.device_id).or_default().insert(r.scenario);
        }
        let expected = most_common(&native_counts);
        for (device, &count) in &native_counts {
            if count != expected {
                push(
                    Check::Balance,
                    device,
                    None,
                    format!("{count} native {side} videos, other devices have {expected}"),
                );
            }
            let have = scenarios.get(device).cloned().unwrap_or_default();
            for s in Scenario::ALL {
                if !have.contains(&s) {
                    push(Check::Coverage, device, None, format!("no native {s} video on {side} side"));
                }
            }
        }
    }

    AuditReport {
        rows: rows.len(),
        devices: devices.len(),
        violations,
    }
}

fn parse_vision_stem(stem: &str) -> Option<(Scenario, Version, String)> {
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() < 3 || parts[1] != "V" {
        return None;
    }
    let tag = parts[2];
    let (scen, version) = if let Some(s) = tag.strip_suffix("WA") {
        (s, Version::Whatsapp)
    } else if let Some(s) = tag.strip_suffix("YT") {
        (s, Version::Youtube)
    } else {
        (tag, Version::Native)
    };
    let scenario: Scenario = scen.parse().ok()?;
    let mut native = parts.clone();
    native[2] = scen;
    Some((scenario, version, native.join("_")))
}

/// Builds a catalog from the published VISION directory layout,
/// `<root>/<ID>_<Brand>_<Model>/videos/<scenario>[WA|YT]/<ID>_V_<scenario>[WA|YT]_<...>.<ext>`.
///
/// Frame counts are left empty; the sampler asks the decoder.
pub fn scan_vision_layout(root: &Path) -> Result<VideoCatalog> {
    const VIDEO_EXT: &[&str] = &["mp4", "mov", "3gp", "avi", "mkv", "m4v"];
    let mut found = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Dataset(format!("scanning {}: {e}", root.display())))?;
        let path = entry.path();
        let is_video = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| VIDEO_EXT.contains(&e.to_ascii_lowercase().as_str()));
        if !entry.file_type().is_file() || !is_video {
            continue;
        }
        let Ok(rel) = path.strip_prefix(root) else { continue };
        let Some(device_dir) = rel.components().next().and_then(|c| c.as_os_str().to_str()) else {
            continue;
        };
        let mut dev_parts = device_dir.splitn(3, '_');
        let (Some(id), Some(brand), Some(model)) = (dev_parts.next(), dev_parts.next(), dev_parts.next()) else {
            log::warn!("skipping {}: device directory not <ID>_<Brand>_<Model>", path.display());
            continue;
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((scenario, version, native_id)) = parse_vision_stem(stem) else {
            log::warn!("skipping {}: unrecognised file name", path.display());
            continue;
        };
        found.push((id.to_string(), brand.to_string(), model.to_string(), stem.to_string(), scenario, version, native_id, path.to_path_buf()));
    }

    let mut instances: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
    for f in &found {
        instances.entry((f.1.clone(), f.2.clone())).or_default().insert(f.0.clone());
    }
    let natives: BTreeSet<String> = found.iter().filter(|f| f.5 == Version::Native).map(|f| f.3.clone()).collect();
    let mut entries = Vec::new();
    for (id, brand, model, video_id, scenario, version, native_id, path) in found {
        if version != Version::Native && !natives.contains(&native_id) {
            log::warn!("skipping {video_id}: native version {native_id} not found");
            continue;
        }
        let siblings = &instances[&(brand.clone(), model.clone())];
        let instance = siblings.iter().position(|s| *s == id).map_or(1, |p| p + 1);
        entries.push(CatalogEntry {
            video_id,
            device_id: id,
            brand,
            model,
            instance: instance.to_string(),
            scenario,
            version,
            parent_id: (version != Version::Native).then_some(native_id),
            path,
            frames: None,
            fps: None,
            duration: None,
        });
    }
    VideoCatalog::new(entries)
}

/// A catalog shaped like the VISION corpus: 35 devices, of which the 28
/// listed below pass the selection criteria once the Asus Zenfone 2 Laser is
/// excluded. The smallest kept device has 13 native videos.
pub fn mock_vision_catalog() -> VideoCatalog {
    // (brand, model, native videos, natives shared on both platforms)
    const DEVICES: &[(&str, &str, usize, usize)] = &[
        ("Apple", "iPhone 4", 19, 19),
        ("Apple", "iPhone 4s", 13, 13),
        ("Apple", "iPhone 4s", 15, 14),
        ("Apple", "iPhone 5", 16, 16),
        ("Apple", "iPhone 5", 14, 13),
        ("Apple", "iPhone 5c", 17, 17),
        ("Apple", "iPhone 5c", 13, 13),
        ("Apple", "iPhone 5c", 14, 14),
        ("Apple", "iPhone 6", 16, 16),
        ("Apple", "iPhone 6", 15, 15),
        ("Apple", "iPhone 6 Plus", 19, 18),
        ("Huawei", "Ascend", 18, 18),
        ("Huawei", "Honor 5C", 19, 19),
        ("Huawei", "P8", 19, 19),
        ("Huawei", "P9", 19, 19),
        ("Huawei", "P9 Lite", 19, 19),
        ("Lenovo", "P70A", 19, 19),
        ("LG", "D290", 19, 19),
        ("OnePlus", "3", 17, 16),
        ("OnePlus", "3", 19, 19),
        ("Samsung", "Galaxy S3 Mini", 16, 16),
        ("Samsung", "Galaxy S3 Mini", 13, 13),
        ("Samsung", "Galaxy S3", 19, 19),
        ("Samsung", "Galaxy S4 Mini", 19, 19),
        ("Samsung", "Galaxy S5", 19, 19),
        ("Samsung", "Galaxy Tab 3", 18, 18),
        ("Sony", "Xperia Z1 Compact", 19, 19),
        ("Xiaomi", "Redmi Note 3", 19, 19),
        // Dropped: excluded model, too few videos, or too few shared.
        ("Asus", "Zenfone 2 Laser", 19, 19),
        ("Apple", "iPad 2", 8, 8),
        ("Apple", "iPad mini", 16, 16),
        ("Microsoft", "Lumia 640 LTE", 10, 10),
        ("Samsung", "Galaxy Tab A", 19, 17),
        ("Samsung", "Galaxy Trend Plus", 12, 12),
        ("Wiko", "Ridge 4G", 11, 11),
    ];
    let mut instance_of: HashMap<(&str, &str), usize> = HashMap::new();
    let mut entries = Vec::new();
    for (i, &(brand, model, natives, shared)) in DEVICES.iter().enumerate() {
        let id = format!("D{:02}", i + 1);
        let instance = instance_of.entry((brand, model)).or_default();
        *instance += 1;
        for n in 0..natives {
            let scenario = Scenario::ALL[n % 3];
            let native_id = format!("{id}_V_{scenario}_{:04}", n + 1);
            let mut push = |video_id: String, version: Version, parent_id: Option<String>| {
                entries.push(CatalogEntry {
                    path: PathBuf::from(format!("{id}/videos/{video_id}.mp4")),
                    video_id,
                    device_id: id.clone(),
                    brand: brand.into(),
                    model: model.into(),
                    instance: instance.to_string(),
                    scenario,
                    version,
                    parent_id,
                    frames: Some(600 + 30 * n),
                    fps: Some(30.0),
                    duration: Some((600 + 30 * n) as f64 / 30.0),
                })
            };
            push(native_id.clone(), Version::Native, None);
            push(format!("{id}_V_{scenario}WA_{:04}", n + 1), Version::Whatsapp, Some(native_id.clone()));
            // Natives beyond `shared` never made it to the second platform.
            if n < shared {
                push(format!("{id}_V_{scenario}YT_{:04}", n + 1), Version::Youtube, Some(native_id.clone()));
            }
        }
    }
    VideoCatalog::new(entries).expect("mock catalog is consistent")
}
