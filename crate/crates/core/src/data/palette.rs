use std::collections::HashMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::IndexMask;
use crate::metrics::CiwTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteEntry {
    pub index: usize,
    pub name: String,
    pub rgb: [u8; 3],
    pub ciw: f64,
}

/// Class index ↔ name ↔ annotation colour ↔ importance weight.
/// Index 0 is background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPalette", into = "RawPalette")]
pub struct ClassPalette {
    entries: Vec<PaletteEntry>,
    by_color: HashMap<[u8; 3], u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPalette {
    classes: Vec<PaletteEntry>,
}

impl TryFrom<RawPalette> for ClassPalette {
    type Error = Error;

    fn try_from(raw: RawPalette) -> Result<Self> {
        ClassPalette::new(raw.classes)
    }
}

impl From<ClassPalette> for RawPalette {
    fn from(p: ClassPalette) -> Self {
        RawPalette { classes: p.entries }
    }
}

const DEFAULT_CLASSES: [(&str, [u8; 3]); 10] = [
    ("Background", [0, 0, 0]),
    ("Crack", [255, 0, 0]),
    ("Hole", [0, 255, 0]),
    ("Root", [0, 0, 255]),
    ("Deformation", [255, 255, 0]),
    ("Fracture", [255, 0, 255]),
    ("Encrustation", [0, 255, 255]),
    ("Joint Problems", [255, 128, 0]),
    ("Loose Gasket", [128, 0, 255]),
    ("Obstruction", [128, 128, 128]),
];

impl Default for ClassPalette {
    fn default() -> Self {
        let ciw = CiwTable::default();
        let names: Vec<&str> = DEFAULT_CLASSES.iter().map(|(n, _)| *n).collect();
        let weights = ciw.resolve(&names);
        let entries = DEFAULT_CLASSES
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(index, ((name, rgb), ciw))| PaletteEntry {
                index,
                name: name.to_string(),
                rgb: *rgb,
                ciw,
            })
            .collect();
        ClassPalette::new(entries).expect("default palette is valid")
    }
}

impl ClassPalette {
    pub fn new(entries: Vec<PaletteEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::config("palette needs at least the background class"));
        }
        if entries.len() > 256 {
            return Err(Error::config(format!("palette has {} classes, at most 256 fit a mask", entries.len())));
        }
        let mut by_color = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.index != i {
                return Err(Error::config(format!(
                    "palette entry {i} ({}) has index {}; indices must run 0, 1, 2, ...",
                    e.name, e.index
                )));
            }
            if !(0.0..=1.0).contains(&e.ciw) {
                return Err(Error::config(format!("CIW {} of {} is outside [0, 1]", e.ciw, e.name)));
            }
            if i == 0 && e.ciw != 0.0 {
                return Err(Error::config("background CIW must be 0"));
            }
            if let Some(prev) = by_color.insert(e.rgb, i as u8) {
                return Err(Error::config(format!(
                    "classes {prev} and {i} share colour {:?}",
                    e.rgb
                )));
            }
        }
        Ok(ClassPalette { entries, by_color })
    }

    /// The first `num_classes` entries of the default palette.
    pub fn default_prefix(num_classes: usize) -> Result<Self> {
        let mut all = Self::default().entries;
        if num_classes == 0 || num_classes > all.len() {
            return Err(Error::config(format!(
                "default palette has {} classes, {num_classes} requested",
                all.len()
            )));
        }
        all.truncate(num_classes);
        Self::new(all)
    }

    /// Background plus the given classes (in the given order), renumbered
    /// from 1.
    pub fn project(&self, classes: &[usize]) -> Result<Self> {
        let mut entries = vec![self.entries[0].clone()];
        for (j, &c) in classes.iter().enumerate() {
            let mut e = self
                .entries
                .get(c)
                .cloned()
                .ok_or_else(|| Error::config(format!("class {c} is not in the palette")))?;
            e.index = j + 1;
            entries.push(e);
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("palette {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("palette serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn ciw(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.ciw).collect()
    }

    pub fn color(&self, index: usize) -> Option<[u8; 3]> {
        self.entries.get(index).map(|e| e.rgb)
    }

    pub fn index_of(&self, rgb: [u8; 3]) -> Option<u8> {
        self.by_color.get(&rgb).copied()
    }

    pub fn index_by_name(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name.eq_ignore_ascii_case(name))
    }

    pub fn encode_mask(&self, mask: &IndexMask) -> Result<RgbImage> {
        mask.validate(self.len())?;
        Ok(RgbImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
            Rgb(self.entries[mask.get(y as usize, x as usize) as usize].rgb)
        }))
    }

    pub fn decode_mask(&self, img: &RgbImage) -> Result<IndexMask> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Vec::with_capacity(w * h);
        for (x, y, px) in img.enumerate_pixels() {
            match self.index_of(px.0) {
                Some(i) => data.push(i),
                None => {
                    return Err(Error::data(format!(
                        "unknown mask colour {:?} at (row {y}, col {x})",
                        px.0
                    )))
                }
            }
        }
        IndexMask::new(h, w, data)
    }
}
