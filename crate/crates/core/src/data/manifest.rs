use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::network::Task;
use crate::roi::BBox;

pub const MANIFEST_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventLabel {
    Benign,
    Malicious,
}

impl EventLabel {
    /// Class index in the event head: benign 0, malicious 1.
    pub fn index(self) -> usize {
        match self {
            EventLabel::Benign => 0,
            EventLabel::Malicious => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EventLabel::Benign => "benign",
            EventLabel::Malicious => "malicious",
        }
    }
}

impl fmt::Display for EventLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EventLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "benign" => Ok(EventLabel::Benign),
            "malicious" => Ok(EventLabel::Malicious),
            other => Err(Error::invalid(format!("unknown event label `{other}` (expected benign or malicious)"))),
        }
    }
}

/// Annotated object categories. Police, helmet and car are rigid; fire and
/// smoke are non-rigid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Police,
    Helmet,
    Car,
    Fire,
    Smoke,
}

impl Category {
    pub const ALL: [Category; 5] = [Category::Police, Category::Helmet, Category::Car, Category::Fire, Category::Smoke];

    pub fn name(self) -> &'static str {
        match self {
            Category::Police => "police",
            Category::Helmet => "helmet",
            Category::Car => "car",
            Category::Fire => "fire",
            Category::Smoke => "smoke",
        }
    }

    /// The detection head responsible for this category.
    pub fn task(self) -> Task {
        match self {
            Category::Police | Category::Helmet | Category::Car => Task::Rigid,
            Category::Fire | Category::Smoke => Task::NonRigid,
        }
    }

    /// Foreground class index within its head (background is 0).
    pub fn class_id(self) -> usize {
        match self {
            Category::Police | Category::Fire => 1,
            Category::Helmet | Category::Smoke => 2,
            Category::Car => 3,
        }
    }

    pub fn from_class(task: Task, class_id: usize) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.task() == task && c.class_id() == class_id)
    }

    pub fn of_task(task: Task) -> Vec<Category> {
        Category::ALL.into_iter().filter(|c| c.task() == task).collect()
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown category `{s}` (expected police, helmet, car, fire or smoke)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path, relative to the manifest's directory unless absolute.
    pub image: String,
    pub event: EventLabel,
    #[serde(default)]
    pub boxes: BTreeMap<Category, Vec<[f64; 4]>>,
    /// `[width, height]`; when present, boxes are bounds-checked at parse time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[usize; 2]>,
}

impl ManifestEntry {
    /// Ground-truth boxes of one head, with per-head class ids.
    pub fn gt_boxes(&self, task: Task) -> Vec<BBox> {
        let mut out = Vec::new();
        for (cat, list) in &self.boxes {
            if cat.task() != task {
                continue;
            }
            for b in list {
                out.push(BBox::new(b[0], b[1], b[2], b[3]).with_class(cat.class_id()));
            }
        }
        out
    }

    fn check_bounds(&self, idx: usize, w: usize, h: usize) -> Result<()> {
        for (cat, list) in &self.boxes {
            for (j, b) in list.iter().enumerate() {
                if b[0] < 0.0 || b[1] < 0.0 || b[2] > w as f64 || b[3] > h as f64 {
                    return Err(Error::schema(
                        Some(idx),
                        format!("boxes.{cat}[{j}]"),
                        format!("box {b:?} exceeds image bounds {w}x{h}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u64,
    pub entries: Vec<ManifestEntry>,
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str, idx: usize) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::schema(Some(idx), name, "missing required field"))
}

fn parse_box(v: &Value, idx: usize, path: &str) -> Result<[f64; 4]> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| Error::schema(Some(idx), path, "box must be an array [x1, y1, x2, y2]"))?;
    let mut b = [0.0; 4];
    for (k, x) in arr.iter().enumerate() {
        b[k] = x
            .as_f64()
            .filter(|f| f.is_finite())
            .ok_or_else(|| Error::schema(Some(idx), path, "box coordinates must be finite numbers"))?;
    }
    if b[2] <= b[0] || b[3] <= b[1] {
        return Err(Error::schema(Some(idx), path, format!("box {b:?} needs x2 > x1 and y2 > y1")));
    }
    Ok(b)
}

fn parse_entry(v: &Value, idx: usize) -> Result<ManifestEntry> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::schema(Some(idx), "entry", "must be an object"))?;
    for key in obj.keys() {
        if !["image", "event", "boxes", "size"].contains(&key.as_str()) {
            return Err(Error::schema(Some(idx), key.as_str(), "unknown field"));
        }
    }
    let image = field(obj, "image", idx)?
        .as_str()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::schema(Some(idx), "image", "must be a non-empty string"))?
        .to_string();
    let event = field(obj, "event", idx)?
        .as_str()
        .ok_or_else(|| Error::schema(Some(idx), "event", "must be a string"))?
        .parse::<EventLabel>()
        .map_err(|_| Error::schema(Some(idx), "event", "must be `benign` or `malicious`"))?;
    let mut boxes = BTreeMap::new();
    if let Some(b) = obj.get("boxes") {
        let map = b
            .as_object()
            .ok_or_else(|| Error::schema(Some(idx), "boxes", "must be an object keyed by category"))?;
        for (name, list) in map {
            let path = format!("boxes.{name}");
            let cat = name.parse::<Category>().map_err(|e| Error::schema(Some(idx), path.as_str(), e.to_string()))?;
            let arr = list
                .as_array()
                .ok_or_else(|| Error::schema(Some(idx), path.as_str(), "must be an array of boxes"))?;
            let parsed = arr
                .iter()
                .enumerate()
                .map(|(j, v)| parse_box(v, idx, &format!("{path}[{j}]")))
                .collect::<Result<Vec<_>>>()?;
            boxes.insert(cat, parsed);
        }
    }
    let size = match obj.get("size") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let s = v
                .as_array()
                .filter(|a| a.len() == 2)
                .and_then(|a| Some([a[0].as_u64()? as usize, a[1].as_u64()? as usize]))
                .filter(|s| s[0] > 0 && s[1] > 0)
                .ok_or_else(|| Error::schema(Some(idx), "size", "must be [width, height] with positive integers"))?;
            Some(s)
        }
    };
    let entry = ManifestEntry {
        image,
        event,
        boxes,
        size,
    };
    if let Some([w, h]) = size {
        entry.check_bounds(idx, w, h)?;
    }
    Ok(entry)
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest {
            version: MANIFEST_VERSION,
            entries,
        }
    }

    /// Parses and validates manifest JSON. Errors name the entry index and
    /// the offending field.
    pub fn parse(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)
            .map_err(|e| Error::Parse {
                line: e.line(),
                message: e.to_string(),
            })?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::schema(None, "manifest", "top level must be an object"))?;
        let version = obj
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::schema(None, "version", "missing or not an integer"))?;
        if version != MANIFEST_VERSION {
            return Err(Error::schema(None, "version", format!("unsupported version {version} (expected {MANIFEST_VERSION})")));
        }
        let entries = obj
            .get("entries")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::schema(None, "entries", "missing or not an array"))?
            .iter()
            .enumerate()
            .map(|(i, e)| parse_entry(e, i))
            .collect::<Result<Vec<_>>>()?;
        // Image paths double as ids for scores and ground truth.
        let mut seen = std::collections::BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if let Some(first) = seen.insert(e.image.as_str(), i) {
                return Err(Error::schema(Some(i), "image", format!("`{}` already listed in entry {first}", e.image)));
            }
        }
        Ok(DatasetManifest { version, entries })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn count(&self, label: EventLabel) -> usize {
        self.entries.iter().filter(|e| e.event == label).count()
    }

    /// Checks boxes of entry `idx` against the decoded image size.
    pub(crate) fn check_entry_size(&self, idx: usize, w: usize, h: usize) -> Result<()> {
        let e = &self.entries[idx];
        if let Some([mw, mh]) = e.size {
            if (mw, mh) != (w, h) {
                return Err(Error::schema(
                    Some(idx),
                    "size",
                    format!("declared {mw}x{mh} but image `{}` is {w}x{h}", e.image),
                ));
            }
        }
        e.check_bounds(idx, w, h)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    DatasetManifest::parse(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"version":1,"entries":[
        {"image":"a.png","event":"malicious","boxes":{"fire":[[1,2,10,12]],"helmet":[[20,20,30,28]]}},
        {"image":"b.png","event":"benign","boxes":{}}
    ]}"#;

    #[test]
    fn minimal_manifest() {
        let m = DatasetManifest::parse(MINIMAL).unwrap();
        assert_eq!(m.entries.len(), 2);
        let rigid = m.entries[0].gt_boxes(Task::Rigid);
        assert_eq!(rigid.len(), 1);
        assert_eq!(rigid[0].class_id, Some(2));
        assert_eq!(m.entries[0].gt_boxes(Task::NonRigid)[0].class_id, Some(1));
    }

    #[test]
    fn unknown_category_names_entry_and_field() {
        let text = r#"{"version":1,"entries":[{"image":"a.png","event":"benign"},
            {"image":"b.png","event":"benign","boxes":{"dog":[[0,0,1,1]]}}]}"#;
        let err = DatasetManifest::parse(text).unwrap_err();
        let msg = err.to_string();
        assert!(err.is_validation());
        assert!(msg.contains("entry 1") && msg.contains("boxes.dog"), "{msg}");
    }

    #[test]
    fn out_of_bounds_box_names_entry() {
        let text = r#"{"version":1,"entries":[{"image":"a.png","event":"benign","size":[32,32],
            "boxes":{"car":[[0,0,40,10]]}}]}"#;
        let msg = DatasetManifest::parse(text).unwrap_err().to_string();
        assert!(msg.contains("entry 0") && msg.contains("boxes.car[0]"), "{msg}");
    }

    #[test]
    fn schema_violations() {
        for text in [
            r#"{"entries":[]}"#,
            r#"{"version":2,"entries":[]}"#,
            r#"{"version":1,"entries":[{"event":"benign"}]}"#,
            r#"{"version":1,"entries":[{"image":"a","event":"riot"}]}"#,
            r#"{"version":1,"entries":[{"image":"a","event":"benign","boxes":{"car":[[5,0,1,1]]}}]}"#,
            r#"{"version":1,"entries":[{"image":"a","event":"benign","colour":1}]}"#,
            r#"{"version":1,"entries":[{"image":"a","event":"benign"},{"image":"a","event":"malicious"}]}"#,
        ] {
            assert!(DatasetManifest::parse(text).unwrap_err().is_validation(), "{text}");
        }
    }

    #[test]
    fn roundtrip() {
        let mut m = DatasetManifest::parse(MINIMAL).unwrap();
        m.entries[1].size = Some([64, 48]);
        assert_eq!(DatasetManifest::parse(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn category_class_ids() {
        for c in Category::ALL {
            assert_eq!(Category::from_class(c.task(), c.class_id()), Some(c));
        }
        assert_eq!(Category::of_task(Task::Rigid).len(), crate::network::RIGID_CLASSES);
        assert_eq!(Category::of_task(Task::NonRigid).len(), crate::network::NONRIGID_CLASSES);
    }
}
