//! Synthetic multi-table benchmark.
//!
//! Every record belongs to one of three domains. Each domain has a fixed
//! schema family: one master table holding one row per entity and five
//! child tables that reference the entity through the shared key column and
//! carry a common numeric attribute. A record bundles 2 to 6 of these
//! tables, a query at one of three complexity tiers, and the gold summary
//! produced by a brute-force oracle that parses the query and scans the
//! tables.
//!
//! Tables whose keys come from the record's entity pool are *linked*; the
//! remaining child tables are distractors keyed by a disjoint id range. A
//! pair of tables is labelled related iff both are linked.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{Table, TableSet};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Healthcare,
    Finance,
    Sports,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Healthcare, Domain::Finance, Domain::Sports];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Healthcare => "healthcare",
            Domain::Finance => "finance",
            Domain::Sports => "sports",
        }
    }

    fn schema(self) -> &'static DomainSchema {
        match self {
            Domain::Healthcare => &HEALTHCARE,
            Domain::Finance => &FINANCE,
            Domain::Sports => &SPORTS,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Complexity {
    Simple,
    Moderate,
    Complex,
}

impl Complexity {
    pub const ALL: [Complexity; 3] = [Complexity::Simple, Complexity::Moderate, Complexity::Complex];

    pub fn as_str(self) -> &'static str {
        match self {
            Complexity::Simple => "simple",
            Complexity::Moderate => "moderate",
            Complexity::Complex => "complex",
        }
    }

    /// Fewest tables a record of this tier can hold.
    fn min_tables(self) -> usize {
        match self {
            Complexity::Simple | Complexity::Moderate => 2,
            // master + three children
            Complexity::Complex => 4,
        }
    }

    /// Whether `touched` distinct tables is consistent with this tier.
    pub fn accepts_touched(self, touched: usize) -> bool {
        match self {
            Complexity::Simple => touched == 1,
            Complexity::Moderate => touched == 2,
            Complexity::Complex => touched >= 3,
        }
    }
}

impl fmt::Display for Complexity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// ---- schemas -----------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Values {
    lo: u32,
    hi: u32,
    step: u32,
}

impl Values {
    fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> u32 {
        let n = (self.hi - self.lo) / self.step;
        self.lo + rng.gen_range(0..=n) * self.step
    }
}

#[derive(Debug)]
struct TableSchema {
    name: &'static str,
    category: &'static str,
    categories: &'static [&'static str],
    value: &'static str,
    values: Values,
}

#[derive(Debug)]
struct DomainSchema {
    /// Key column name; entity ids are `<key>_<n>`.
    key: &'static str,
    master: TableSchema,
    children: [TableSchema; 5],
}

const fn child(name: &'static str, category: &'static str, categories: &'static [&'static str], value: &'static str, values: Values) -> TableSchema {
    TableSchema { name, category, categories, value, values }
}

const COST: Values = Values { lo: 5, hi: 500, step: 5 };
const AMOUNT: Values = Values { lo: 10, hi: 990, step: 10 };
const POINTS: Values = Values { lo: 1, hi: 99, step: 1 };

static HEALTHCARE: DomainSchema = DomainSchema {
    key: "patient",
    master: child("patients", "ward", &["cardiology", "oncology", "pediatrics", "neurology"], "age", Values { lo: 18, hi: 90, step: 1 }),
    children: [
        child("visits", "dept", &["emergency", "outpatient", "inpatient", "dental"], "cost", COST),
        child("labs", "test", &["blood", "urine", "glucose", "lipid"], "cost", COST),
        child("prescriptions", "drug", &["aspirin", "insulin", "statin", "antibiotic"], "cost", COST),
        child("scans", "scan", &["xray", "mri", "ct", "ultrasound"], "cost", COST),
        child("therapies", "therapy", &["physio", "speech", "occupational", "respiratory"], "cost", COST),
    ],
};

static FINANCE: DomainSchema = DomainSchema {
    key: "account",
    master: child("accounts", "segment", &["retail", "business", "private", "student"], "balance", Values { lo: 100, hi: 990, step: 10 }),
    children: [
        child("transactions", "channel", &["online", "atm", "counter", "mobile"], "amount", AMOUNT),
        child("branches", "branch", &["north", "south", "east", "west"], "amount", AMOUNT),
        child("loans", "loan", &["mortgage", "auto", "personal", "credit"], "amount", AMOUNT),
        child("deposits", "product", &["savings", "checking", "term", "bond"], "amount", AMOUNT),
        child("fees", "fee", &["overdraft", "wire", "maintenance", "late"], "amount", AMOUNT),
    ],
};

static SPORTS: DomainSchema = DomainSchema {
    key: "player",
    master: child("players", "position", &["guard", "forward", "center", "keeper"], "age", Values { lo: 18, hi: 40, step: 1 }),
    children: [
        child("matches", "opponent", &["lions", "hawks", "bears", "wolves"], "points", POINTS),
        child("teams", "team", &["red", "blue", "green", "gold"], "points", POINTS),
        child("tournaments", "event", &["open", "cup", "league", "masters"], "points", POINTS),
        child("trainings", "drill", &["sprint", "passing", "shooting", "defense"], "points", POINTS),
        child("awards", "award", &["mvp", "rookie", "allstar", "captain"], "points", POINTS),
    ],
};

// ---- records -------------------------------------------------------------------

/// Cell coordinate `(table, row, column)`.
pub type CellRef = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryRecord {
    pub id: String,
    pub domain: Domain,
    pub query: String,
    pub tables: TableSet,
    pub evidence: Vec<CellRef>,
    pub summary: String,
    pub complexity: Complexity,
}

impl QueryRecord {
    pub fn touched_tables(&self) -> usize {
        self.evidence.iter().map(|e| e.0).collect::<BTreeSet<_>>().len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tables.len();
        if !(2..=6).contains(&n) {
            return Err(Error::Data(format!("record {} has {n} tables, expected 2..=6", self.id)));
        }
        self.tables.validate()?;
        for &(t, r, c) in &self.evidence {
            let ok = self.tables.tables.get(t).is_some_and(|tb| r < tb.rows.len() && c < tb.columns.len());
            if !ok {
                return Err(Error::Data(format!("record {} evidence ({t},{r},{c}) out of range", self.id)));
            }
        }
        if self.summary.trim().is_empty() {
            return Err(Error::Data(format!("record {} has an empty summary", self.id)));
        }
        if !self.complexity.accepts_touched(self.touched_tables()) {
            return Err(Error::Data(format!(
                "record {} is {} but its evidence touches {} tables",
                self.id,
                self.complexity,
                self.touched_tables()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub num_records: usize,
    pub seed: u64,
    pub tables: (usize, usize),
    pub rows: (usize, usize),
    /// Weights for simple, moderate, complex.
    pub complexity_mix: [f64; 3],
    /// Weights for healthcare, finance, sports.
    pub domain_mix: [f64; 3],
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_records: 200,
            seed: 7,
            tables: (2, 6),
            rows: (2, 4),
            complexity_mix: [1.0, 1.0, 1.0],
            domain_mix: [1.0, 1.0, 1.0],
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_records == 0 {
            return bad("num_records must be positive".into());
        }
        let (tlo, thi) = self.tables;
        if tlo < 2 || thi > 6 || tlo > thi {
            return bad(format!("table range [{tlo},{thi}] must lie within [2,6]"));
        }
        let (rlo, rhi) = self.rows;
        if rlo < 2 || rhi > 30 || rlo > rhi {
            return bad(format!("row range [{rlo},{rhi}] must lie within [2,30]"));
        }
        for (name, mix) in [("complexity", self.complexity_mix), ("domain", self.domain_mix)] {
            if mix.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || mix.iter().all(|w| *w == 0.0) {
                return bad(format!("{name} mix must be nonnegative and not all zero"));
            }
        }
        if !Complexity::ALL.iter().zip(self.complexity_mix).any(|(c, w)| w > 0.0 && c.min_tables() <= thi) {
            return bad("no weighted complexity tier fits the table range".into());
        }
        Ok(())
    }

    fn main_pool(&self) -> u32 {
        40.max(2 * self.rows.1 as u32)
    }

    fn distractor_pool(&self) -> u32 {
        40.max(5 * self.rows.1 as u32)
    }
}

/// Parsed query template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryPlan {
    Lookup { attr: String, entity: String },
    GroupTotal { attr: String, table: String, group_column: String, group: String },
    Compare { a: String, b: String, attr: String, tables: Vec<String> },
}

impl QueryPlan {
    pub fn render(&self) -> String {
        match self {
            QueryPlan::Lookup { attr, entity } => format!("what is the {attr} of {entity} ?"),
            QueryPlan::GroupTotal { attr, table, group_column, group } => {
                format!("what is the total {attr} in {table} for {group_column} {group} ?")
            }
            QueryPlan::Compare { a, b, attr, tables } => {
                let (last, init) = tables.split_last().expect("compare needs tables");
                format!("which of {a} and {b} has the higher total {attr} across {} and {last} ?", init.join(" , "))
            }
        }
    }

    pub fn complexity(&self) -> Complexity {
        match self {
            QueryPlan::Lookup { .. } => Complexity::Simple,
            QueryPlan::GroupTotal { .. } => Complexity::Moderate,
            QueryPlan::Compare { .. } => Complexity::Complex,
        }
    }
}

impl FromStr for QueryPlan {
    type Err = Error;

    fn from_str(query: &str) -> Result<Self> {
        let w: Vec<&str> = query.split_whitespace().collect();
        let fail = || Error::Oracle(format!("query does not match any template: {query:?}"));
        match w.as_slice() {
            ["what", "is", "the", "total", attr, "in", table, "for", col, group, "?"] => Ok(QueryPlan::GroupTotal {
                attr: attr.to_string(),
                table: table.to_string(),
                group_column: col.to_string(),
                group: group.to_string(),
            }),
            ["what", "is", "the", attr, "of", entity, "?"] => {
                Ok(QueryPlan::Lookup { attr: attr.to_string(), entity: entity.to_string() })
            }
            ["which", "of", a, "and", b, "has", "the", "higher", "total", attr, "across", rest @ .., "?"] => {
                // t1 , t2 , ... and tn
                let mut tables = Vec::new();
                let mut expect_name = true;
                for (i, tok) in rest.iter().enumerate() {
                    if expect_name {
                        tables.push(tok.to_string());
                    } else {
                        let is_last_sep = i + 2 == rest.len();
                        let want = if is_last_sep { "and" } else { "," };
                        if *tok != want {
                            return Err(fail());
                        }
                    }
                    expect_name = !expect_name;
                }
                if tables.len() < 2 || expect_name {
                    return Err(fail());
                }
                Ok(QueryPlan::Compare { a: a.to_string(), b: b.to_string(), attr: attr.to_string(), tables })
            }
            _ => Err(fail()),
        }
    }
}

/// Result of running the oracle over a table set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleAnswer {
    pub summary: String,
    pub evidence: Vec<CellRef>,
}

fn find_table<'a>(ts: &'a TableSet, name: &str) -> Result<(usize, &'a Table)> {
    let i = ts.table_index(name).ok_or_else(|| Error::Oracle(format!("table {name:?} not found")))?;
    Ok((i, &ts.tables[i]))
}

fn column(t: &Table, name: &str) -> Result<usize> {
    t.column_index(name).ok_or_else(|| Error::Oracle(format!("column {name:?} not in table {:?}", t.name)))
}

fn int_cell(t: &Table, r: usize, c: usize) -> Result<u64> {
    t.rows[r][c].parse().map_err(|_| Error::Oracle(format!("cell ({r},{c}) of {:?} is not an integer", t.name)))
}

/// Sum of `attr` over rows of `t` whose key (column 0) is in `keys`, plus
/// the contributing cells.
fn keyed_sum(ti: usize, t: &Table, attr: &str, keys: &HashSet<&str>) -> Result<(u64, Vec<CellRef>)> {
    let c = column(t, attr)?;
    let mut total = 0;
    let mut cells = Vec::new();
    for (r, row) in t.rows.iter().enumerate() {
        if keys.contains(row[0].as_str()) {
            total += int_cell(t, r, c)?;
            cells.push((ti, r, c));
        }
    }
    Ok((total, cells))
}

/// Brute-force join / filter / aggregate oracle: parses `query` and scans
/// the tables to produce the gold summary and the cells it read.
pub fn run_oracle(query: &str, ts: &TableSet) -> Result<OracleAnswer> {
    let plan: QueryPlan = query.parse()?;
    let mut evidence = Vec::new();
    let summary = match &plan {
        QueryPlan::Lookup { attr, entity } => {
            let mut hits = Vec::new();
            for (ti, t) in ts.tables.iter().enumerate() {
                if let Some(c) = t.column_index(attr) {
                    for (r, row) in t.rows.iter().enumerate() {
                        if row[0] == *entity {
                            hits.push((ti, r, c));
                        }
                    }
                }
            }
            let [(ti, r, c)] = hits[..] else {
                return Err(Error::Oracle(format!("entity {entity:?} with {attr:?} found {} times", hits.len())));
            };
            evidence.push((ti, r, c));
            format!("The {attr} of {entity} is {} .", ts.tables[ti].rows[r][c])
        }
        QueryPlan::GroupTotal { attr, table, group_column, group } => {
            let masters: Vec<usize> =
                (0..ts.len()).filter(|&i| ts.tables[i].column_index(group_column).is_some()).collect();
            let [mi] = masters[..] else {
                return Err(Error::Oracle(format!("group column {group_column:?} found in {} tables", masters.len())));
            };
            let master = &ts.tables[mi];
            let gc = column(master, group_column)?;
            let mut keys = HashSet::new();
            for (r, row) in master.rows.iter().enumerate() {
                if row[gc] == *group {
                    keys.insert(row[0].as_str());
                    evidence.push((mi, r, gc));
                }
            }
            if keys.is_empty() {
                return Err(Error::Oracle(format!("group {group:?} not found")));
            }
            let (ti, t) = find_table(ts, table)?;
            let (total, cells) = keyed_sum(ti, t, attr, &keys)?;
            if cells.is_empty() {
                return Err(Error::Oracle(format!("no {table:?} rows for group {group:?}")));
            }
            evidence.extend(cells);
            format!("The total {attr} for {group} is {total} .")
        }
        QueryPlan::Compare { a, b, attr, tables } => {
            let (mut va, mut vb) = (0u64, 0u64);
            let (ka, kb) = (HashSet::from([a.as_str()]), HashSet::from([b.as_str()]));
            for name in tables {
                let (ti, t) = find_table(ts, name)?;
                let (sa, ca) = keyed_sum(ti, t, attr, &ka)?;
                let (sb, cb) = keyed_sum(ti, t, attr, &kb)?;
                if ca.is_empty() || cb.is_empty() {
                    return Err(Error::Oracle(format!("entity missing from {name:?}")));
                }
                va += sa;
                vb += sb;
                evidence.extend(ca);
                evidence.extend(cb);
            }
            match va.cmp(&vb) {
                std::cmp::Ordering::Greater => format!("{a} has a higher {attr} than {b} ( {va} vs {vb} ) ."),
                std::cmp::Ordering::Less => format!("{b} has a higher {attr} than {a} ( {vb} vs {va} ) ."),
                std::cmp::Ordering::Equal => return Err(Error::Oracle(format!("tie between {a} and {b} at {va}"))),
            }
        }
    };
    evidence.sort_unstable();
    evidence.dedup();
    Ok(OracleAnswer { summary, evidence })
}

/// Gold summary of a record, recomputed from its query and tables.
pub fn gold_summary(query: &str, ts: &TableSet) -> Result<String> {
    run_oracle(query, ts).map(|a| a.summary)
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn entity(key: &str, n: u32) -> String {
    format!("{key}_{n}")
}

fn build_table<R: Rng + ?Sized>(schema: &TableSchema, key: &str, keys: &[String], rng: &mut R) -> Table {
    let rows = keys
        .iter()
        .map(|k| {
            vec![
                k.clone(),
                schema.categories.choose(rng).unwrap().to_string(),
                schema.values.sample(rng).to_string(),
            ]
        })
        .collect();
    Table::new(schema.name, vec![key.into(), schema.category.into(), schema.value.into()], rows)
}

/// Deterministic record `index` of the corpus described by `spec`.
pub fn generate_record(spec: &CorpusSpec, index: usize) -> QueryRecord {
    let mut rng = record_rng(spec.seed, index);
    for _ in 0..1000 {
        if let Some(rec) = try_generate(spec, index, &mut rng) {
            return rec;
        }
    }
    panic!("record {index}: generator could not produce a tie-free record (generator bug)");
}

fn try_generate(spec: &CorpusSpec, index: usize, rng: &mut ChaCha8Rng) -> Option<QueryRecord> {
    let domain = Domain::ALL[WeightedIndex::new(spec.domain_mix).ok()?.sample(rng)];
    let schema = domain.schema();
    let (tlo, thi) = spec.tables;

    let mut n = rng.gen_range(tlo..=thi);
    let weights_for = |n: usize| -> [f64; 3] {
        let mut w = spec.complexity_mix;
        for (wi, c) in w.iter_mut().zip(Complexity::ALL) {
            if c.min_tables() > n {
                *wi = 0.0;
            }
        }
        w
    };
    if weights_for(n).iter().all(|w| *w == 0.0) {
        let feasible: Vec<usize> = (tlo..=thi).filter(|&k| weights_for(k).iter().any(|w| *w > 0.0)).collect();
        n = *feasible.choose(rng)?;
    }
    let complexity = Complexity::ALL[WeightedIndex::new(weights_for(n)).ok()?.sample(rng)];

    // Entity pool and child selection.
    let (rlo, rhi) = spec.rows;
    let e = rng.gen_range(rlo..=rhi);
    let main: Vec<u32> = rand::seq::index::sample(rng, spec.main_pool() as usize, e).into_iter().map(|i| i as u32 + 1).collect();
    let entities: Vec<String> = main.iter().map(|&i| entity(schema.key, i)).collect();

    let mut child_ids: Vec<usize> = (0..schema.children.len()).collect();
    child_ids.shuffle(rng);
    child_ids.truncate(n - 1);
    let touched = match complexity {
        Complexity::Simple => 0,
        Complexity::Moderate => 1,
        Complexity::Complex => rng.gen_range(3..=n - 1),
    };
    let linked: Vec<bool> = (0..n - 1).map(|k| k < touched || rng.gen_bool(0.5)).collect();

    // Distractor keys are drawn without replacement across all distractors.
    let distractor_start = spec.main_pool() + 1;
    let mut distractor_keys: Vec<u32> = (distractor_start..distractor_start + spec.distractor_pool()).collect();
    distractor_keys.shuffle(rng);

    let master = build_table(&schema.master, schema.key, &entities, rng);
    let mut tables = vec![(master, true)];
    for (k, &cid) in child_ids.iter().enumerate() {
        let cs = &schema.children[cid];
        let keys: Vec<String> = if linked[k] {
            let r = rng.gen_range(rlo.max(e)..=rhi.max(e));
            let mut keys = entities.clone();
            for _ in e..r {
                keys.push(entities.choose(rng).unwrap().clone());
            }
            keys.shuffle(rng);
            keys
        } else {
            let r = rng.gen_range(rlo..=rhi);
            distractor_keys.drain(..r).map(|i| entity(schema.key, i)).collect()
        };
        tables.push((build_table(cs, schema.key, &keys, rng), linked[k]));
    }

    let plan = match complexity {
        Complexity::Simple => {
            let attr = if rng.gen_bool(0.5) { schema.master.category } else { schema.master.value };
            QueryPlan::Lookup { attr: attr.into(), entity: entities.choose(rng).unwrap().clone() }
        }
        Complexity::Moderate => {
            let present: BTreeSet<&str> = tables[0].0.rows.iter().map(|r| r[1].as_str()).collect();
            let present: Vec<&str> = present.into_iter().collect();
            QueryPlan::GroupTotal {
                attr: schema.children[child_ids[0]].value.into(),
                table: schema.children[child_ids[0]].name.into(),
                group_column: schema.master.category.into(),
                group: present.choose(rng).unwrap().to_string(),
            }
        }
        Complexity::Complex => {
            let pair: Vec<&String> = entities.choose_multiple(rng, 2).collect();
            QueryPlan::Compare {
                a: pair[0].clone(),
                b: pair[1].clone(),
                attr: schema.children[child_ids[0]].value.into(),
                tables: child_ids[..touched].iter().map(|&c| schema.children[c].name.to_string()).collect(),
            }
        }
    };

    tables.shuffle(rng);
    let linked_flags: Vec<bool> = tables.iter().map(|t| t.1).collect();
    let mut ts = TableSet::new(tables.into_iter().map(|t| t.0).collect());
    for i in 0..n {
        for j in i + 1..n {
            ts.set_relation(i, j, linked_flags[i] && linked_flags[j]).ok()?;
        }
    }

    let query = plan.render();
    // A tie in a comparison has no valid summary; draw again.
    let answer = run_oracle(&query, &ts).ok()?;
    Some(QueryRecord {
        id: format!("r{index:05}"),
        domain,
        query,
        tables: ts,
        evidence: answer.evidence,
        summary: answer.summary,
        complexity,
    })
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<QueryRecord>> {
    spec.validate()?;
    Ok((0..spec.num_records).map(|i| generate_record(spec, i)).collect())
}

/// Fraction of distinct key values shared by two tables, relative to the
/// smaller key set. Keys are the first column.
pub fn key_overlap(a: &Table, b: &Table) -> f64 {
    let ka: HashSet<&str> = a.rows.iter().map(|r| r[0].as_str()).collect();
    let kb: HashSet<&str> = b.rows.iter().map(|r| r[0].as_str()).collect();
    let denom = ka.len().min(kb.len());
    if denom == 0 {
        return 0.0;
    }
    ka.intersection(&kb).count() as f64 / denom as f64
}

// ---- dataset files -------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    id: String,
    domain: Domain,
    query: String,
    tables: Vec<Table>,
    relations: Vec<(usize, usize, bool)>,
    evidence: Vec<(usize, usize, usize)>,
    summary: String,
    complexity: Complexity,
}

impl From<&QueryRecord> for RecordLine {
    fn from(r: &QueryRecord) -> Self {
        RecordLine {
            id: r.id.clone(),
            domain: r.domain,
            query: r.query.clone(),
            tables: r.tables.tables.clone(),
            relations: r.tables.relations().collect(),
            evidence: r.evidence.clone(),
            summary: r.summary.clone(),
            complexity: r.complexity,
        }
    }
}

impl TryFrom<RecordLine> for QueryRecord {
    type Error = Error;

    fn try_from(l: RecordLine) -> Result<Self> {
        let mut ts = TableSet::new(l.tables);
        for (i, j, label) in l.relations {
            if i >= j {
                return Err(Error::InvalidRelation { i, j, tables: ts.len() });
            }
            ts.set_relation(i, j, label)?;
        }
        let rec = QueryRecord {
            id: l.id,
            domain: l.domain,
            query: l.query,
            tables: ts,
            evidence: l.evidence,
            summary: l.summary,
            complexity: l.complexity,
        };
        rec.validate()?;
        Ok(rec)
    }
}

pub fn record_to_json(r: &QueryRecord) -> String {
    serde_json::to_string(&RecordLine::from(r)).expect("records serialize")
}

pub fn record_from_json(line: &str) -> Result<QueryRecord> {
    serde_json::from_str::<RecordLine>(line)?.try_into()
}

/// Writes one JSON object per line, LF terminated.
pub fn write_dataset(records: &[QueryRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        out.write_all(record_to_json(r).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<QueryRecord>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        let rec = record_from_json(&line)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

/// Vocabulary over every query, summary and linearized table of `records`.
pub fn build_vocab(records: &[QueryRecord]) -> Result<Vocab> {
    let mut texts = Vec::new();
    for r in records {
        texts.push(r.query.clone());
        texts.push(r.summary.clone());
        for t in &r.tables.tables {
            texts.push(t.linearize()?);
        }
    }
    Ok(Vocab::build(texts.iter().map(String::as_str)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Index range of a split: the first 80% of records train, the next 10% dev,
/// the rest test.
pub fn split_range(n: usize, split: Split) -> std::ops::Range<usize> {
    let (a, b) = (n * 8 / 10, n * 9 / 10);
    match split {
        Split::Train => 0..a,
        Split::Dev => a..b,
        Split::Test => b..n,
    }
}

pub fn split(records: &[QueryRecord], split: Split) -> &[QueryRecord] {
    &records[split_range(records.len(), split)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> CorpusSpec {
        CorpusSpec { num_records: n, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(10);
        for i in 0..10 {
            assert_eq!(record_to_json(&generate_record(&s, i)), record_to_json(&generate_record(&s, i)));
        }
        assert_ne!(generate_record(&s, 0), generate_record(&s, 1));
    }

    #[test]
    fn table_range_is_forced() {
        let s = CorpusSpec { tables: (2, 2), ..spec(40) };
        for r in generate_corpus(&s).unwrap() {
            assert_eq!(r.tables.len(), 2);
            assert_ne!(r.complexity, Complexity::Complex);
        }
        let s = CorpusSpec { tables: (6, 6), ..spec(20) };
        assert!(generate_corpus(&s).unwrap().iter().all(|r| r.tables.len() == 6));
    }

    #[test]
    fn simple_evidence_sits_in_one_table() {
        let s = CorpusSpec { complexity_mix: [1.0, 0.0, 0.0], ..spec(30) };
        for r in generate_corpus(&s).unwrap() {
            assert_eq!(r.complexity, Complexity::Simple);
            assert_eq!(r.touched_tables(), 1);
            assert_eq!(r.evidence.len(), 1);
        }
    }

    #[test]
    fn lookup_template_fill() {
        let t = Table::new(
            "patients",
            vec!["patient".into(), "ward".into(), "age".into()],
            vec![vec!["patient_7".into(), "oncology".into(), "42".into()]],
        );
        let other = Table::new("visits", vec!["patient".into(), "dept".into(), "cost".into()], vec![]);
        let ts = TableSet::new(vec![other, t]);
        let a = run_oracle("what is the age of patient_7 ?", &ts).unwrap();
        assert_eq!(a.summary, "The age of patient_7 is 42 .");
        assert_eq!(a.evidence, vec![(1, 0, 2)]);
    }

    fn row(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn cols() -> Vec<String> {
        row(&["patient", "dept", "cost"])
    }

    #[test]
    fn group_total_matches_filter_then_sum() {
        let master = Table::new(
            "patients",
            row(&["patient", "ward", "age"]),
            vec![row(&["patient_1", "oncology", "30"]), row(&["patient_2", "cardiology", "40"]), row(&["patient_3", "oncology", "50"])],
        );
        let visits = Table::new(
            "visits",
            cols(),
            vec![
                row(&["patient_2", "er", "100"]),
                row(&["patient_1", "er", "3"]),
                row(&["patient_3", "er", "4"]),
                row(&["patient_1", "er", "5"]),
            ],
        );
        let ts = TableSet::new(vec![master.clone(), visits.clone()]);
        let a = run_oracle("what is the total cost in visits for ward oncology ?", &ts).unwrap();

        // Independent recount: join on key, filter by ward, sum cost.
        let mut total = 0;
        for v in &visits.rows {
            let m = master.rows.iter().find(|m| m[0] == v[0]).unwrap();
            if m[1] == "oncology" {
                total += v[2].parse::<u64>().unwrap();
            }
        }
        assert_eq!(total, 12);
        assert_eq!(a.summary, format!("The total cost for oncology is {total} ."));
        assert_eq!(a.evidence, vec![(0, 0, 1), (0, 2, 1), (1, 1, 2), (1, 2, 2), (1, 3, 2)]);
    }

    #[test]
    fn compare_names_larger_entity_first() {
        let mk = |name: &str, rows: Vec<Vec<String>>| Table::new(name, cols(), rows);
        let ts = TableSet::new(vec![
            mk("visits", vec![row(&["patient_1", "er", "2"]), row(&["patient_2", "er", "3"])]),
            mk("labs", vec![row(&["patient_2", "blood", "4"]), row(&["patient_1", "blood", "1"])]),
            mk("scans", vec![row(&["patient_1", "ct", "1"]), row(&["patient_2", "ct", "2"])]),
        ]);
        let q = "which of patient_1 and patient_2 has the higher total cost across visits , labs and scans ?";
        let a = run_oracle(q, &ts).unwrap();
        // patient_1: 2+1+1 = 4, patient_2: 3+4+2 = 9
        assert_eq!(a.summary, "patient_2 has a higher cost than patient_1 ( 9 vs 4 ) .");
        assert_eq!(a.evidence.len(), 6);
        let tie = TableSet::new(vec![mk("visits", vec![row(&["patient_1", "er", "2"]), row(&["patient_2", "er", "2"])])]);
        assert!(run_oracle("which of patient_1 and patient_2 has the higher total cost across visits and visits ?", &tie).is_err());
    }

    #[test]
    fn query_plans_round_trip_through_text() {
        let plans = [
            QueryPlan::Lookup { attr: "age".into(), entity: "player_3".into() },
            QueryPlan::GroupTotal { attr: "amount".into(), table: "loans".into(), group_column: "segment".into(), group: "retail".into() },
            QueryPlan::Compare { a: "x_1".into(), b: "x_2".into(), attr: "points".into(), tables: vec!["a".into(), "b".into(), "c".into(), "d".into()] },
        ];
        for p in plans {
            assert_eq!(p.render().parse::<QueryPlan>().unwrap(), p);
        }
        assert!("tell me everything".parse::<QueryPlan>().is_err());
        assert!("which of a and b has the higher total cost across x , y , z ?".parse::<QueryPlan>().is_err());
    }

    #[test]
    fn oracle_faults_on_missing_entity() {
        let ts = TableSet::new(vec![Table::new("patients", row(&["patient", "ward", "age"]), vec![])]);
        assert!(matches!(gold_summary("what is the age of patient_9 ?", &ts), Err(Error::Oracle(_))));
    }

    #[test]
    fn corpus_self_consistency() {
        let recs = generate_corpus(&spec(150)).unwrap();
        for r in &recs {
            r.validate().unwrap();
            let a = run_oracle(&r.query, &r.tables).unwrap();
            assert_eq!(a.summary, r.summary);
            assert_eq!(a.evidence, r.evidence);
            for (i, j, label) in r.tables.relation_candidates() {
                let ov = key_overlap(&r.tables.tables[i], &r.tables.tables[j]);
                if label {
                    assert!(ov >= 0.5, "{} ({i},{j}) overlap {ov}", r.id);
                } else {
                    assert!(ov < 0.1, "{} ({i},{j}) overlap {ov}", r.id);
                }
            }
        }
        for c in Complexity::ALL {
            assert!(recs.iter().any(|r| r.complexity == c));
        }
        for d in Domain::ALL {
            assert!(recs.iter().any(|r| r.domain == d));
        }
    }

    #[test]
    fn dataset_round_trip_and_splits() {
        let recs = generate_corpus(&spec(100)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&recs, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), recs);
        assert_eq!(split(&recs, Split::Train).len(), 80);
        assert_eq!(split(&recs, Split::Dev).len(), 10);
        assert_eq!(split(&recs, Split::Test).len(), 10);
        let bytes = fs::read(&path).unwrap();
        assert!(!bytes.contains(&b'\r'));
    }

    #[test]
    fn truncated_file_reports_first_bad_line() {
        let recs = generate_corpus(&spec(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&recs, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let cut = text.lines().take(2).collect::<Vec<_>>().join("\n") + "\n" + &text.lines().nth(2).unwrap()[..40];
        fs::write(&path, cut).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        assert!(CorpusSpec { tables: (1, 3), ..spec(1) }.validate().is_err());
        assert!(CorpusSpec { rows: (2, 31), ..spec(1) }.validate().is_err());
        assert!(CorpusSpec { complexity_mix: [0.0; 3], ..spec(1) }.validate().is_err());
        assert!(CorpusSpec { num_records: 0, ..spec(1) }.validate().is_err());
        assert!(CorpusSpec { tables: (2, 3), complexity_mix: [0.0, 0.0, 1.0], ..spec(1) }.validate().is_err());
    }
}
