//! Impression pages, training samples, and the dataset file format.
//!
//! A dataset file is newline-delimited UTF-8 text, one impression page per
//! line, with tab-separated top-level fields:
//!
//! ```text
//! page_id \t user_id \t profile_f1,profile_f2 \t item:cat:seller \t short_seq \t long_seq \t exposures
//! ```
//!
//! Sequences are `item:cat:seller` triples joined by `;`, exposures are
//! `item:cat:seller:label` quadruples joined by `;`, and an empty sequence
//! serializes as `-`. All ids are base-10 nonnegative integers.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

/// The streamlined per-item features: item id, category id, seller id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemFeatures {
    pub item_id: u64,
    pub category_id: u64,
    pub seller_id: u64,
}

/// User id plus a fixed-length list of categorical profile fields.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserProfile {
    pub user_id: u64,
    pub profile_fields: Vec<u64>,
}

/// Short- and long-term behavior sequences, most recent item first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BehaviorSequence {
    pub short: Vec<ItemFeatures>,
    pub long: Vec<ItemFeatures>,
}

/// One in-page exposure event: the user, the trigger item they clicked to
/// enter, and the ordered exposed items with click labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImpressionPage {
    pub page_id: u64,
    pub user: UserProfile,
    pub trigger: ItemFeatures,
    pub exposures: Vec<(ItemFeatures, u8)>,
    pub sequences: BehaviorSequence,
}

impl ImpressionPage {
    /// Structural checks: at least one exposure, binary labels, and the
    /// trigger item absent from the exposure list.
    pub fn validate(&self) -> Result<(), String> {
        if self.exposures.is_empty() {
            return Err("page has no exposures".to_string());
        }
        for (item, label) in &self.exposures {
            if *label > 1 {
                return Err(format!("click_label {label} is not 0/1"));
            }
            if item.item_id == self.trigger.item_id {
                return Err(format!(
                    "trigger item {} appears in exposures",
                    item.item_id
                ));
            }
        }
        Ok(())
    }

    pub fn clicked_count(&self) -> usize {
        self.exposures.iter().filter(|(_, l)| *l == 1).count()
    }
}

/// One exposure of a page promoted to prediction target; the page's other
/// exposures are its context set.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub page: Arc<ImpressionPage>,
    pub target_index: usize,
}

impl TrainingSample {
    pub fn new(page: Arc<ImpressionPage>, target_index: usize) -> TrainingSample {
        assert!(
            target_index < page.exposures.len(),
            "target_index {target_index} out of range for {} exposures",
            page.exposures.len()
        );
        TrainingSample { page, target_index }
    }

    /// One sample per exposure: every exposed item takes a turn as target.
    pub fn expand_page(page: &Arc<ImpressionPage>) -> Vec<TrainingSample> {
        (0..page.exposures.len())
            .map(|i| TrainingSample::new(Arc::clone(page), i))
            .collect()
    }

    pub fn target(&self) -> &(ItemFeatures, u8) {
        &self.page.exposures[self.target_index]
    }

    pub fn target_label(&self) -> u8 {
        self.page.exposures[self.target_index].1
    }

    /// Context items (all exposures except the target), in page order.
    pub fn context(&self) -> impl Iterator<Item = &(ItemFeatures, u8)> {
        let target = self.target_index;
        self.page
            .exposures
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != target)
            .map(|(_, e)| e)
    }

    pub fn context_len(&self) -> usize {
        self.page.exposures.len() - 1
    }
}

// ── errors ───────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum DataError {
    Io { path: String, source: std::io::Error },
    /// A line that does not parse; carries the 1-based line number and the
    /// field being parsed when the error occurred.
    Malformed { line: usize, field: &'static str, detail: String },
    /// A line that parses but violates a page invariant.
    Validation { line: usize, detail: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "{path}: {source}"),
            DataError::Malformed { line, field, detail } => {
                write!(f, "line {line}: bad field `{field}`: {detail}")
            }
            DataError::Validation { line, detail } => {
                write!(f, "line {line}: invalid page: {detail}")
            }
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DataError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

// ── serialization ────────────────────────────────────────────────────

fn push_item(out: &mut String, item: &ItemFeatures) {
    out.push_str(&format!(
        "{}:{}:{}",
        item.item_id, item.category_id, item.seller_id
    ));
}

fn push_seq(out: &mut String, seq: &[ItemFeatures]) {
    if seq.is_empty() {
        out.push('-');
        return;
    }
    for (i, item) in seq.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        push_item(out, item);
    }
}

/// Serialize one page to its line form (no trailing newline).
pub fn page_to_line(page: &ImpressionPage) -> String {
    let mut out = String::new();
    out.push_str(&page.page_id.to_string());
    out.push('\t');
    out.push_str(&page.user.user_id.to_string());
    out.push('\t');
    if page.user.profile_fields.is_empty() {
        out.push('-');
    } else {
        let fields: Vec<String> = page.user.profile_fields.iter().map(|f| f.to_string()).collect();
        out.push_str(&fields.join(","));
    }
    out.push('\t');
    push_item(&mut out, &page.trigger);
    out.push('\t');
    push_seq(&mut out, &page.sequences.short);
    out.push('\t');
    push_seq(&mut out, &page.sequences.long);
    out.push('\t');
    for (i, (item, label)) in page.exposures.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        push_item(&mut out, item);
        out.push(':');
        out.push_str(&label.to_string());
    }
    out
}

/// Write pages to `path`, one line per page, trailing newline included.
pub fn write_dataset(pages: &[ImpressionPage], path: &Path) -> Result<(), DataError> {
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let mut buf = String::new();
    for page in pages {
        buf.push_str(&page_to_line(page));
        buf.push('\n');
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(buf.as_bytes())
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

// ── parsing ──────────────────────────────────────────────────────────

fn parse_u64(s: &str, line: usize, field: &'static str) -> Result<u64, DataError> {
    s.parse::<u64>().map_err(|_| DataError::Malformed {
        line,
        field,
        detail: format!("`{s}` is not a nonnegative integer"),
    })
}

fn parse_item(s: &str, line: usize, field: &'static str) -> Result<ItemFeatures, DataError> {
    let mut parts = s.split(':');
    let item_id = parse_u64(
        parts.next().unwrap_or(""), line, field,
    )?;
    let category_id = parse_u64(
        parts.next().ok_or(DataError::Malformed {
            line,
            field,
            detail: format!("`{s}` is missing category id"),
        })?,
        line,
        field,
    )?;
    let seller_id = parse_u64(
        parts.next().ok_or(DataError::Malformed {
            line,
            field,
            detail: format!("`{s}` is missing seller id"),
        })?,
        line,
        field,
    )?;
    if parts.next().is_some() {
        return Err(DataError::Malformed {
            line,
            field,
            detail: format!("`{s}` has too many `:` parts"),
        });
    }
    Ok(ItemFeatures { item_id, category_id, seller_id })
}

fn parse_seq(s: &str, line: usize, field: &'static str) -> Result<Vec<ItemFeatures>, DataError> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(';').map(|part| parse_item(part, line, field)).collect()
}

/// Parse one dataset line. `min_exposures` is 2 for training datasets
/// (context must exist) and 1 for single records fed to scoring.
pub fn parse_page_line(
    s: &str,
    line: usize,
    min_exposures: usize,
) -> Result<ImpressionPage, DataError> {
    let fields: Vec<&str> = s.split('\t').collect();
    if fields.len() != 7 {
        return Err(DataError::Malformed {
            line,
            field: "record",
            detail: format!("expected 7 tab-separated fields, got {}", fields.len()),
        });
    }
    let page_id = parse_u64(fields[0], line, "page_id")?;
    let user_id = parse_u64(fields[1], line, "user_id")?;
    let profile_fields = if fields[2] == "-" {
        Vec::new()
    } else {
        fields[2]
            .split(',')
            .map(|f| parse_u64(f, line, "profile_fields"))
            .collect::<Result<Vec<u64>, DataError>>()?
    };
    let trigger = parse_item(fields[3], line, "trigger")?;
    let short = parse_seq(fields[4], line, "short_seq")?;
    let long = parse_seq(fields[5], line, "long_seq")?;

    let mut exposures = Vec::new();
    for part in fields[6].split(';') {
        let bits: Vec<&str> = part.split(':').collect();
        if bits.len() != 4 {
            return Err(DataError::Malformed {
                line,
                field: "exposures",
                detail: format!("`{part}` is not item:cat:seller:label"),
            });
        }
        let item = ItemFeatures {
            item_id: parse_u64(bits[0], line, "exposures")?,
            category_id: parse_u64(bits[1], line, "exposures")?,
            seller_id: parse_u64(bits[2], line, "exposures")?,
        };
        let label = parse_u64(bits[3], line, "click_label")?;
        if label > 1 {
            return Err(DataError::Malformed {
                line,
                field: "click_label",
                detail: format!("label `{label}` is not 0 or 1"),
            });
        }
        exposures.push((item, label as u8));
    }

    let page = ImpressionPage {
        page_id,
        user: UserProfile { user_id, profile_fields },
        trigger,
        exposures,
        sequences: BehaviorSequence { short, long },
    };
    page.validate()
        .map_err(|detail| DataError::Validation { line, detail })?;
    if page.exposures.len() < min_exposures {
        return Err(DataError::Validation {
            line,
            detail: format!(
                "page has {} exposures, datasets require at least {min_exposures}",
                page.exposures.len()
            ),
        });
    }
    Ok(page)
}

/// Parse a dataset file. Every page must have at least 2 exposures so that
/// each target has a context set.
pub fn parse_dataset(path: &Path) -> Result<Vec<ImpressionPage>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset_str(&text)
}

pub fn parse_dataset_str(text: &str) -> Result<Vec<ImpressionPage>, DataError> {
    let mut pages = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        pages.push(parse_page_line(line, i + 1, 2)?);
    }
    Ok(pages)
}
