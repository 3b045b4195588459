use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use super::{merge_behaviors, Aggregation, DatasetManifest, Interaction, InteractionDataset, InteractionRecord, Regime, Split};
use crate::error::{contract, Error, Result};

/// Column delimiter of an interaction file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Format {
    /// `user<TAB>item[<TAB>weight][<TAB>behavior]`
    #[default]
    Tsv,
    /// Same columns, comma separated.
    Csv,
}

impl Format {
    fn delimiter(self) -> char {
        match self {
            Format::Tsv => '\t',
            Format::Csv => ',',
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Format::Tsv),
            "csv" => Ok(Format::Csv),
            other => contract(format!("unknown format `{other}` (expected tsv or csv)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    pub format: Format,
    /// Skip the first non-comment line (column names).
    pub header: bool,
    pub regime: Regime,
    pub aggregation: Aggregation,
}

/// Parses interaction rows; `#` lines and blank lines are skipped.
pub fn parse_interactions<R: Read>(reader: R, opts: &LoadOptions) -> Result<Vec<InteractionRecord>> {
    let delim = opts.format.delimiter();
    let mut out = Vec::new();
    let mut header_pending = opts.header;
    for (k, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = k + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if header_pending {
            header_pending = false;
            continue;
        }
        let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
        let bad = |msg: String| Error::Parse { line: lineno, msg };
        if fields.len() < 2 || fields.len() > 4 {
            return Err(bad(format!("expected 2 to 4 fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(bad("empty user or item id".into()));
        }
        let weight = match fields.get(2) {
            None => 1.0,
            Some(w) => w
                .parse::<f64>()
                .ok()
                .filter(|w| *w >= 0.0 && w.is_finite())
                .ok_or_else(|| bad(format!("invalid weight `{w}`")))?,
        };
        out.push(InteractionRecord {
            user_id: fields[0].to_string(),
            item_id: fields[1].to_string(),
            weight,
            behavior: fields.get(3).filter(|b| !b.is_empty()).map(|b| b.to_string()),
        });
    }
    Ok(out)
}

/// Reads and deduplicates an interaction file. Every edge starts in train.
pub fn load_interactions(path: &Path, opts: &LoadOptions) -> Result<InteractionDataset> {
    let file = fs::File::open(path)?;
    let records = parse_interactions(file, opts)?;
    if records.is_empty() {
        return contract("empty dataset");
    }
    merge_behaviors(&records, opts.regime, opts.aggregation)
}

const EDGES_FILE: &str = "interactions.tsv";
const USERS_FILE: &str = "users.txt";
const ITEMS_FILE: &str = "items.txt";
const MANIFEST_FILE: &str = "manifest.json";

/// Writes the canonical split dataset: remapped edges with split tags, the id
/// tables, and a manifest.
pub fn write_prepared(ds: &InteractionDataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut edges = String::from("# user\titem\tweight\tsplit\n");
    for e in ds.edges() {
        edges.push_str(&format!("{}\t{}\t{}\t{}\n", e.user, e.item, e.weight, e.split.as_str()));
    }
    write_atomic(&dir.join(EDGES_FILE), edges.as_bytes())?;
    write_atomic(&dir.join(USERS_FILE), (ds.user_ids().join("\n") + "\n").as_bytes())?;
    write_atomic(&dir.join(ITEMS_FILE), (ds.item_ids().join("\n") + "\n").as_bytes())?;
    let manifest = ds.manifest();
    write_atomic(
        &dir.join(MANIFEST_FILE),
        (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes(),
    )?;
    Ok(manifest)
}

/// Loads a directory produced by [`write_prepared`], verifying the checksum.
pub fn read_prepared(dir: &Path) -> Result<InteractionDataset> {
    let read_ids = |name: &str| -> Result<Vec<String>> {
        Ok(fs::read_to_string(dir.join(name))?
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect())
    };
    let user_ids = read_ids(USERS_FILE)?;
    let item_ids = read_ids(ITEMS_FILE)?;
    let text = fs::read_to_string(dir.join(EDGES_FILE))?;
    let mut edges = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            line: k + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let split = match f[3] {
            "train" => Split::Train,
            "valid" => Split::Valid,
            "test" => Split::Test,
            _ => return Err(bad("unknown split tag")),
        };
        edges.push(Interaction {
            user: f[0].parse().map_err(|_| bad("bad user index"))?,
            item: f[1].parse().map_err(|_| bad("bad item index"))?,
            weight: f[2].parse().map_err(|_| bad("bad weight"))?,
            split,
        });
    }
    let ds = InteractionDataset::new(user_ids, item_ids, edges)?;
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.checksum != ds.checksum() {
        return contract(format!("checksum mismatch for prepared dataset in {}", dir.display()));
    }
    Ok(ds)
}

/// Write to a sibling temp file, then rename into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_row_file() {
        let opts = LoadOptions::default();
        let rs = parse_interactions("u1\ti1\n".as_bytes(), &opts).unwrap();
        let ds = merge_behaviors(&rs, Regime::Binary, Aggregation::Count).unwrap();
        assert_eq!((ds.n_users(), ds.n_items(), ds.len()), (1, 1, 1));
    }

    #[test]
    fn duplicate_csv_rows_dedup() {
        let opts = LoadOptions {
            format: Format::Csv,
            ..Default::default()
        };
        let rs = parse_interactions("u1,i1\nu1,i1\n".as_bytes(), &opts).unwrap();
        let ds = merge_behaviors(&rs, Regime::Binary, Aggregation::Count).unwrap();
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn malformed_row_reports_line() {
        let opts = LoadOptions::default();
        let err = parse_interactions("# c\nu1\ti1\nu2\ti2\tabc\n".as_bytes(), &opts).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
        let err = parse_interactions("solo\n".as_bytes(), &opts).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn header_and_weights_and_behaviors() {
        let opts = LoadOptions {
            header: true,
            ..Default::default()
        };
        let rs = parse_interactions("userID\titemID\tweight\n2\t51\t13883\n2\t52\t11690\tview\n".as_bytes(), &opts).unwrap();
        assert_eq!(rs.len(), 2);
        assert_eq!(rs[0].weight, 13883.0);
        assert_eq!(rs[1].behavior.as_deref(), Some("view"));
    }

    #[test]
    fn empty_file_is_contract_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.tsv");
        fs::write(&p, "# nothing\n").unwrap();
        let err = load_interactions(&p, &LoadOptions::default()).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn prepared_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = InteractionDataset::from_pairs(2, 3, &[(0, 1), (1, 2), (0, 0)]).unwrap();
        let ds = ds.with_splits(&[Split::Train, Split::Test, Split::Valid]).unwrap();
        let m = write_prepared(&ds, dir.path()).unwrap();
        let back = read_prepared(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(m.checksum, back.checksum());
    }
}
