//! GPS points to hexagon tokens.
//!
//! Points are placed on an equirectangular plane (`x = lon`, `y = lat`, both in
//! degrees) that is tiled with pointy-top hexagons of circumradius
//! `base_circumradius / 2^resolution`. Cells are addressed with axial
//! coordinates and interned into a dense token vocabulary.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT_3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    /// Seconds since epoch.
    pub t: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64, t: f64) -> Self {
        Self { lat, lon, t }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::Input(format!("latitude {} outside [-90, 90]", self.lat)));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::Input(format!("longitude {} outside [-180, 180]", self.lon)));
        }
        if !self.t.is_finite() || self.t < 0.0 {
            return Err(Error::Input(format!("timestamp {} is not a finite non-negative value", self.t)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TessellationConfig {
    pub resolution: u8,
    /// Circumradius at resolution 0, in degrees.
    pub base_circumradius: f64,
    pub dedupe_consecutive: bool,
}

impl Default for TessellationConfig {
    fn default() -> Self {
        Self {
            resolution: 8,
            base_circumradius: 1.0,
            dedupe_consecutive: true,
        }
    }
}

impl TessellationConfig {
    /// Effective circumradius `R` in degrees.
    pub fn circumradius(&self) -> f64 {
        self.base_circumradius / 2f64.powi(i32::from(self.resolution))
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.circumradius();
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::Config(format!(
                "circumradius {} at resolution {} must be positive",
                self.base_circumradius, self.resolution
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HexCell {
    pub q: i64,
    pub r: i64,
}

impl HexCell {
    pub const fn new(q: i64, r: i64) -> Self {
        Self { q, r }
    }

    /// Centre of the cell in plane coordinates `(x, y) = (lon, lat)`.
    pub fn center(&self, circumradius: f64) -> (f64, f64) {
        let q = self.q as f64;
        let r = self.r as f64;
        (
            circumradius * (SQRT_3 * q + SQRT_3 / 2.0 * r),
            circumradius * 1.5 * r,
        )
    }

    pub fn distance(&self, other: &HexCell) -> i64 {
        let dq = self.q - other.q;
        let dr = self.r - other.r;
        (dq.abs() + dr.abs() + (dq + dr).abs()) / 2
    }

    pub fn is_adjacent(&self, other: &HexCell) -> bool {
        self.distance(other) == 1
    }
}

/// Rounds fractional cube coordinates to the containing cell: round each
/// component, then recompute the one with the largest rounding error so that
/// `x + y + z = 0` holds.
fn cube_round(fq: f64, fr: f64) -> HexCell {
    let fs = -fq - fr;
    let mut q = fq.round();
    let mut r = fr.round();
    let s = fs.round();
    let dq = (q - fq).abs();
    let dr = (r - fr).abs();
    let ds = (s - fs).abs();
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    HexCell::new(q as i64, r as i64)
}

pub fn latlon_to_cell(p: &GeoPoint, cfg: &TessellationConfig) -> Result<HexCell> {
    p.validate()?;
    cfg.validate()?;
    let size = cfg.circumradius();
    let (x, y) = (p.lon, p.lat);
    let fq = (SQRT_3 / 3.0 * x - y / 3.0) / size;
    let fr = (2.0 / 3.0 * y) / size;
    Ok(cube_round(fq, fr))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub resolution: u8,
    pub q: i64,
    pub r: i64,
}

/// Dense interning of cells into token ids `0..len()`.
#[derive(Debug, Clone, Default)]
pub struct TokenDictionary {
    cell_to_id: HashMap<CellKey, u32>,
    id_to_cell: Vec<CellKey>,
}

#[derive(Serialize, Deserialize)]
struct DictRecord {
    id: u32,
    resolution: u8,
    q: i64,
    r: i64,
}

impl TokenDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.id_to_cell.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_cell.is_empty()
    }

    pub fn intern(&mut self, key: CellKey) -> u32 {
        if let Some(&id) = self.cell_to_id.get(&key) {
            return id;
        }
        let id = self.id_to_cell.len() as u32;
        self.id_to_cell.push(key);
        self.cell_to_id.insert(key, id);
        id
    }

    pub fn get(&self, key: &CellKey) -> Option<u32> {
        self.cell_to_id.get(key).copied()
    }

    pub fn cell(&self, id: u32) -> Option<CellKey> {
        self.id_to_cell.get(id as usize).copied()
    }

    pub fn to_jsonl(&self) -> String {
        crate::io::to_jsonl(self.id_to_cell.iter().enumerate().map(|(id, k)| DictRecord {
            id: id as u32,
            resolution: k.resolution,
            q: k.q,
            r: k.r,
        }))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut dict = Self::new();
        for (n, line) in crate::io::read_lines(path)? {
            let rec: DictRecord = crate::io::parse_json_line(path, n, &line)?;
            let key = CellKey {
                resolution: rec.resolution,
                q: rec.q,
                r: rec.r,
            };
            if rec.id as usize != dict.len() || dict.get(&key).is_some() {
                return Err(Error::parse(path, n, "dictionary ids must be dense and unique"));
            }
            dict.intern(key);
        }
        Ok(dict)
    }
}

/// Maps a time-ordered trace to token ids, extending `dict` in first-seen order.
pub fn tokenize_trace(
    points: &[GeoPoint],
    cfg: &TessellationConfig,
    dict: &mut TokenDictionary,
) -> Result<Vec<u32>> {
    if points.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    for (i, w) in points.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(Error::Ordering { position: i + 1 });
        }
    }
    // Validate everything before touching the dictionary.
    let cells = points
        .iter()
        .map(|p| latlon_to_cell(p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut tokens: Vec<u32> = Vec::with_capacity(cells.len());
    for cell in cells {
        let id = dict.intern(CellKey {
            resolution: cfg.resolution,
            q: cell.q,
            r: cell.r,
        });
        if cfg.dedupe_consecutive && tokens.last() == Some(&id) {
            continue;
        }
        tokens.push(id);
    }
    Ok(tokens)
}

#[derive(Debug, Deserialize)]
struct RawRow {
    user_id: String,
    #[serde(default)]
    trace_id: Option<String>,
    lat: f64,
    lon: f64,
    t: f64,
}

/// Points of one (user, trace) group from a raw CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrace {
    pub user_id: String,
    pub trace_id: Option<String>,
    pub points: Vec<GeoPoint>,
}

/// Reads `user_id,lat,lon,t[,trace_id]` rows and groups them by
/// (user, trace), in order of first appearance.
pub fn read_raw_csv(path: &Path) -> Result<Vec<RawTrace>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut traces: Vec<RawTrace> = Vec::new();
    let mut index: HashMap<(String, Option<String>), usize> = HashMap::new();
    for row in reader.deserialize::<RawRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let key = (row.user_id.clone(), row.trace_id.clone());
        let k = *index.entry(key).or_insert_with(|| {
            traces.push(RawTrace {
                user_id: row.user_id.clone(),
                trace_id: row.trace_id.clone(),
                points: Vec::new(),
            });
            traces.len() - 1
        });
        traces[k].points.push(GeoPoint::new(row.lat, row.lon, row.t));
    }
    if traces.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(traces)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::parse(path, line, format!("{kind:?}")),
    }
}

/// Tokenizes every trace of a raw CSV file. User ids become class labels
/// `0..k` in sorted order of the original ids.
pub fn tokenize_csv(path: &Path, cfg: &TessellationConfig) -> Result<(crate::corpus::Corpus, TokenDictionary)> {
    cfg.validate()?;
    let traces = read_raw_csv(path)?;
    let users: std::collections::BTreeSet<&str> = traces.iter().map(|t| t.user_id.as_str()).collect();
    let label: HashMap<&str, usize> = users.iter().enumerate().map(|(i, u)| (*u, i)).collect();
    let mut dict = TokenDictionary::new();
    let mut trajectories = Vec::with_capacity(traces.len());
    for t in &traces {
        let tokens = tokenize_trace(&t.points, cfg, &mut dict).inspect_err(|e| {
            log::error!("user {} trace {}: {e}", t.user_id, t.trace_id.as_deref().unwrap_or("-"));
        })?;
        trajectories.push(crate::corpus::Trajectory::new(label[t.user_id.as_str()], tokens));
    }
    let corpus = crate::corpus::Corpus::new(trajectories, users.len(), dict.len())?;
    Ok((corpus, dict))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(res: u8) -> TessellationConfig {
        TessellationConfig {
            resolution: res,
            base_circumradius: 1.0,
            dedupe_consecutive: true,
        }
    }

    /// Brute-force nearest centre over a 5x5 axial neighbourhood of the cell
    /// whose centre is closest by a coarse rectangular guess.
    fn nearest_center(p: &GeoPoint, size: f64) -> HexCell {
        let r0 = (p.lat / (1.5 * size)).round() as i64;
        let q0 = ((p.lon / (SQRT_3 * size)) - r0 as f64 / 2.0).round() as i64;
        let mut best = (f64::INFINITY, HexCell::new(q0, r0));
        for dq in -2..=2 {
            for dr in -2..=2 {
                let c = HexCell::new(q0 + dq, r0 + dr);
                let (x, y) = c.center(size);
                let d = (x - p.lon).hypot(y - p.lat);
                if d < best.0 {
                    best = (d, c);
                }
            }
        }
        best.1
    }

    #[test]
    fn origin_maps_to_origin_cell() {
        for res in [0, 3, 9] {
            let c = latlon_to_cell(&GeoPoint::new(0.0, 0.0, 5.0), &cfg(res)).unwrap();
            assert_eq!(c, HexCell::new(0, 0));
        }
    }

    #[test]
    fn mapping_is_deterministic() {
        let p = GeoPoint::new(41.9, 12.5, 1.0);
        let a = latlon_to_cell(&p, &cfg(8)).unwrap();
        let b = latlon_to_cell(&p, &cfg(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn displacement_toward_neighbour() {
        let c = cfg(2);
        let size = c.circumradius();
        // East neighbour (q+1, r) lies at distance sqrt(3) R; shared edge at sqrt(3) R / 2.
        let near = GeoPoint::new(0.0, 0.49 * size, 0.0);
        assert_eq!(latlon_to_cell(&near, &c).unwrap(), HexCell::new(0, 0));
        assert_eq!(nearest_center(&near, size), HexCell::new(0, 0));
        let beyond = GeoPoint::new(0.0, SQRT_3 / 2.0 * size + 0.01 * size, 0.0);
        assert_eq!(latlon_to_cell(&beyond, &c).unwrap(), HexCell::new(1, 0));
        assert_eq!(nearest_center(&beyond, size), HexCell::new(1, 0));
    }

    #[test]
    fn out_of_range_is_rejected() {
        let bad = GeoPoint::new(91.0, 0.0, 0.0);
        assert!(matches!(latlon_to_cell(&bad, &cfg(1)), Err(Error::Input(_))));
        let bad = GeoPoint::new(0.0, -180.5, 0.0);
        assert!(matches!(latlon_to_cell(&bad, &cfg(1)), Err(Error::Input(_))));
        let bad = GeoPoint::new(0.0, 0.0, f64::NAN);
        assert!(latlon_to_cell(&bad, &cfg(1)).is_err());
    }

    #[test]
    fn collapses_points_in_one_cell() {
        let c = cfg(0);
        let pts = [
            GeoPoint::new(0.0, 0.0, 1.0),
            GeoPoint::new(0.01, 0.0, 2.0),
            GeoPoint::new(0.0, 0.02, 3.0),
        ];
        let mut dict = TokenDictionary::new();
        assert_eq!(tokenize_trace(&pts, &c, &mut dict).unwrap(), vec![0]);
    }

    #[test]
    fn a_b_a_keeps_revisit() {
        let c = cfg(0);
        let step = SQRT_3; // one cell east at R = 1
        let pts = [
            GeoPoint::new(0.0, 0.0, 1.0),
            GeoPoint::new(0.0, step, 2.0),
            GeoPoint::new(0.0, 0.0, 3.0),
        ];
        let mut dict = TokenDictionary::new();
        let toks = tokenize_trace(&pts, &c, &mut dict).unwrap();
        assert_eq!(toks, vec![0, 1, 0]);
        assert_eq!(dict.len(), 2);
    }

    #[test]
    fn dedupe_can_be_disabled() {
        let c = TessellationConfig {
            dedupe_consecutive: false,
            ..cfg(0)
        };
        let pts = [GeoPoint::new(0.0, 0.0, 1.0), GeoPoint::new(0.0, 0.1, 2.0)];
        let mut dict = TokenDictionary::new();
        assert_eq!(tokenize_trace(&pts, &c, &mut dict).unwrap(), vec![0, 0]);
    }

    #[test]
    fn ordering_and_empty_errors() {
        let c = cfg(0);
        let mut dict = TokenDictionary::new();
        assert!(matches!(
            tokenize_trace(&[], &c, &mut dict),
            Err(Error::EmptyTrajectory)
        ));
        let pts = [GeoPoint::new(0.0, 0.0, 2.0), GeoPoint::new(0.0, 0.0, 2.0)];
        assert!(matches!(
            tokenize_trace(&pts, &c, &mut dict),
            Err(Error::Ordering { position: 1 })
        ));
        let pts = [GeoPoint::new(0.0, 0.0, 3.0), GeoPoint::new(0.0, 0.0, 1.0)];
        assert!(tokenize_trace(&pts, &c, &mut dict).is_err());
        assert!(dict.is_empty());
    }

    #[test]
    fn eastward_walk_crosses_k_boundaries() {
        let c = cfg(3);
        let size = c.circumradius();
        let k = 6;
        // Walk along the equator from the origin centre to the k-th east centre.
        let steps = 400;
        let end = SQRT_3 * size * k as f64;
        let pts: Vec<GeoPoint> = (0..=steps)
            .map(|i| GeoPoint::new(0.0, end * i as f64 / steps as f64, i as f64))
            .collect();
        let mut dict = TokenDictionary::new();
        let toks = tokenize_trace(&pts, &c, &mut dict).unwrap();
        assert_eq!(toks.len(), k + 1);
        // Oracle: recompute cells independently and check adjacency.
        let mut oracle: Vec<HexCell> = pts.iter().map(|p| nearest_center(p, size)).collect();
        oracle.dedup();
        assert_eq!(oracle.len(), k + 1);
        for (tok, cell) in toks.iter().zip(&oracle) {
            let key = dict.cell(*tok).unwrap();
            assert_eq!((key.q, key.r), (cell.q, cell.r));
        }
        for w in oracle.windows(2) {
            assert!(w[0].is_adjacent(&w[1]));
        }
    }

    #[test]
    fn dictionary_round_trip() {
        let mut dict = TokenDictionary::new();
        for (q, r) in [(0, 0), (3, -1), (-2, 5)] {
            dict.intern(CellKey { resolution: 4, q, r });
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dict.jsonl");
        std::fs::write(&path, dict.to_jsonl()).unwrap();
        let back = TokenDictionary::load(&path).unwrap();
        assert_eq!(back.len(), 3);
        for id in 0..3 {
            assert_eq!(back.cell(id), dict.cell(id));
        }
    }

    #[test]
    fn csv_groups_by_user_and_trace() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.csv");
        std::fs::write(
            &p,
            "user_id,lat,lon,t,trace_id\nbob,0,0,1,a\nbob,0,5,2,a\nann,0,0,1,x\nbob,0,0,9,b\n",
        )
        .unwrap();
        let traces = read_raw_csv(&p).unwrap();
        assert_eq!(traces.len(), 3);
        assert_eq!(traces[0].points.len(), 2);
        let (corpus, dict) = tokenize_csv(&p, &cfg(0)).unwrap();
        assert_eq!(corpus.num_users, 2);
        // "ann" sorts first.
        assert_eq!(corpus.trajectories[0].user, 1);
        assert_eq!(corpus.trajectories[1].user, 0);
        assert_eq!(corpus.vocab_size, dict.len());
        assert_eq!(corpus.trajectories[0].tokens, vec![0, 1]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.csv");
        std::fs::write(&p, "user_id,lat,lon,t\nu,0,0,1\nu,zero,0,2\n").unwrap();
        match read_raw_csv(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&p, "user_id,lat,lon,t\nu,0,0,2\nu,0,0,1\n").unwrap();
        assert!(matches!(tokenize_csv(&p, &cfg(0)), Err(Error::Ordering { position: 1 })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn containment_matches_nearest_center(lat in -60.0f64..60.0, lon in -170.0f64..170.0, res in 0u8..10) {
                let c = cfg(res);
                let size = c.circumradius();
                let p = GeoPoint::new(lat, lon, 0.0);
                let cell = latlon_to_cell(&p, &c).unwrap();
                let (x, y) = cell.center(size);
                let d = (x - lon).hypot(y - lat);
                prop_assert!(d <= size * (1.0 + 1e-9));
                let oracle = nearest_center(&p, size);
                let (ox, oy) = oracle.center(size);
                let od = (ox - lon).hypot(oy - lat);
                // Equal unless the point sits on a shared edge.
                prop_assert!(cell == oracle || (d - od).abs() <= 1e-9 * size);
            }

            #[test]
            fn interning_is_bijective(cells in proptest::collection::vec((-20i64..20, -20i64..20), 1..60)) {
                let mut dict = TokenDictionary::new();
                for (q, r) in &cells {
                    dict.intern(CellKey { resolution: 1, q: *q, r: *r });
                }
                for id in 0..dict.len() as u32 {
                    let key = dict.cell(id).unwrap();
                    prop_assert_eq!(dict.get(&key), Some(id));
                }
            }

            #[test]
            fn dedupe_is_idempotent(offsets in proptest::collection::vec(0i64..4, 1..30)) {
                let c = cfg(0);
                let pts: Vec<GeoPoint> = offsets
                    .iter()
                    .enumerate()
                    .map(|(i, o)| GeoPoint::new(0.0, SQRT_3 * *o as f64, i as f64))
                    .collect();
                let mut dict = TokenDictionary::new();
                let once = tokenize_trace(&pts, &c, &mut dict).unwrap();
                // Keep one point per run and tokenize again.
                let mut collapsed = Vec::new();
                let mut last = None;
                for p in &pts {
                    let cell = latlon_to_cell(p, &c).unwrap();
                    if last != Some(cell) {
                        collapsed.push(*p);
                        last = Some(cell);
                    }
                }
                let twice = tokenize_trace(&collapsed, &c, &mut dict).unwrap();
                prop_assert_eq!(once, twice);
            }
        }
    }
}
