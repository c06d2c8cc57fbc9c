//! The 54 visualization design rules as executable predicates.
//!
//! Each rule is a conjunction of clauses over [`Facts`], the resolved view of
//! one chart against its data profiles. [`lint`] evaluates every rule;
//! [`explain`] evaluates one and reports the evidence behind each clause.
//! Rules fire independently of one another.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    detect_overlap, profile_field, DataError, DataTable, FieldKind, FieldProfile, TableProfile,
};
use crate::spec::{Channel, ChartSpec, Coordinates, Encoding, MarkType, ScaleType};

const PROBLEMS_NATURAL: &str = include_str!("../data/problems.txt");
const PROBLEMS_FORMAL: &str = include_str!("../data/problems_formal.txt");

pub const CATALOG_SIZE: usize = 54;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Encoding,
    Mark,
    Stack,
    Scale,
    Data,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Encoding,
        Category::Mark,
        Category::Stack,
        Category::Scale,
        Category::Data,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Encoding => "encoding",
            Category::Mark => "mark",
            Category::Stack => "stack",
            Category::Scale => "scale",
            Category::Data => "data",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RuleDescriptor {
    pub name: &'static str,
    pub category: Category,
    pub description_nl: &'static str,
    pub description_asp: Option<&'static str>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error("unknown rule `{0}`")]
    UnknownRule(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// The rule names a (spec, data) pair violates, kept sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViolationSet(BTreeSet<String>);

impl ViolationSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from names, rejecting any that are not in the catalog.
    pub fn from_names<I, S>(names: I) -> Result<Self, RuleError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for n in names {
            let n = n.as_ref();
            if rule_index(n).is_none() {
                return Err(RuleError::UnknownRule(n.to_owned()));
            }
            set.insert(n.to_owned());
        }
        Ok(ViolationSet(set))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.0.iter().cloned().collect()
    }

    /// Whether every name is a catalog rule.
    pub fn is_valid(&self) -> bool {
        self.iter().all(|n| rule_index(n).is_some())
    }

    fn insert(&mut self, name: &str) {
        self.0.insert(name.to_owned());
    }
}

impl fmt::Display for ViolationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serde_json::to_string(&self.0).expect("strings serialize"))
    }
}

/// Instance id to sorted violation names.
pub type LintReport = BTreeMap<String, ViolationSet>;

struct Catalog {
    descriptors: Vec<RuleDescriptor>,
    rules: Vec<&'static Rule>,
    index: HashMap<&'static str, usize>,
}

fn parse_listing(text: &'static str) -> Vec<(&'static str, &'static str)> {
    text.split("\n\n")
        .filter(|b| !b.trim().is_empty())
        .map(|block| {
            let block = block.trim_matches('\n');
            let (head, body) = block
                .split_once('\n')
                .expect("rule block has a description");
            let name = head
                .strip_prefix("name: ")
                .expect("rule block starts with `name: `");
            (name, body)
        })
        .collect()
}

static CATALOG: LazyLock<Catalog> = LazyLock::new(|| {
    let formal: HashMap<_, _> = parse_listing(PROBLEMS_FORMAL).into_iter().collect();
    let mut descriptors = Vec::with_capacity(CATALOG_SIZE);
    let mut rules = Vec::with_capacity(CATALOG_SIZE);
    let mut index = HashMap::with_capacity(CATALOG_SIZE);
    for (name, nl) in parse_listing(PROBLEMS_NATURAL) {
        let rule = RULES
            .iter()
            .find(|r| r.name == name)
            .unwrap_or_else(|| panic!("no predicate for `{name}`"));
        index.insert(name, descriptors.len());
        descriptors.push(RuleDescriptor {
            name,
            category: rule.category,
            description_nl: nl,
            description_asp: formal.get(name).copied(),
        });
        rules.push(rule);
    }
    assert_eq!(descriptors.len(), CATALOG_SIZE);
    assert_eq!(RULES.len(), CATALOG_SIZE);
    Catalog {
        descriptors,
        rules,
        index,
    }
});

/// All rules in their canonical listing order.
pub fn rule_catalog() -> &'static [RuleDescriptor] {
    &CATALOG.descriptors
}

pub fn rule_index(name: &str) -> Option<usize> {
    CATALOG.index.get(name).copied()
}

pub fn descriptor(name: &str) -> Option<&'static RuleDescriptor> {
    rule_index(name).map(|i| &CATALOG.descriptors[i])
}

/// Rule names of one category, in catalog order.
pub fn category_members(category: Category) -> impl Iterator<Item = &'static str> {
    rule_catalog()
        .iter()
        .filter(move |d| d.category == category)
        .map(|d| d.name)
}

/// Rule names grouped by category in results-table row order.
pub fn report_order() -> Vec<(Category, Vec<&'static str>)> {
    Category::ALL
        .into_iter()
        .map(|c| {
            let names = REPORT_ROWS
                .iter()
                .copied()
                .filter(|n| descriptor(n).is_some_and(|d| d.category == c))
                .collect();
            (c, names)
        })
        .collect()
}

const REPORT_ROWS: [&str; CATALOG_SIZE] = [
    "size_negative",
    "shape_without_point",
    "size_without_point_text",
    "same_field_x_and_y",
    "same_field",
    "same_field_grt3",
    "rect_without_d_d",
    "number_categorical",
    "only_discrete",
    "only_y",
    "multi_non_pos",
    "non_pos_used_before_pos",
    "line_area_with_discrete",
    "bar_tick_continuous_x_y",
    "bar_tick_area_line_without_continuous_x_y",
    "area_bar_with_log",
    "c_c_point",
    "c_c_line",
    "c_c_area",
    "d_d_point",
    "d_d_rect",
    "c_d_overlap_point",
    "c_d_overlap_bar",
    "c_d_overlap_line",
    "c_d_overlap_area",
    "c_d_overlap_tick",
    "c_d_no_overlap_point",
    "c_d_no_overlap_bar",
    "c_d_no_overlap_line",
    "c_d_no_overlap_area",
    "no_stack_with_bar_area_discrete_color",
    "stack_without_discrete_color_or_detail",
    "stack_discrete",
    "log_scale",
    "log_x",
    "log_y",
    "ordinal_scale",
    "ordinal_x",
    "ordinal_y",
    "categorical_scale",
    "categorical_color",
    "linear_color",
    "linear_size",
    "log_color",
    "log_size",
    "ordinal_color",
    "ordinal_size",
    "ordinal_shape",
    "high_cardinality_ordinal",
    "high_cardinality_categorical_grt10",
    "high_cardinality_shape",
    "high_cardinality_size",
    "horizontal_scrolling_x",
    "polar_coordinate",
];

/// Collects human-readable evidence when explaining; free when linting.
pub struct Evidence {
    notes: Option<Vec<String>>,
}

impl Evidence {
    fn silent() -> Self {
        Evidence { notes: None }
    }

    fn recording() -> Self {
        Evidence {
            notes: Some(Vec::new()),
        }
    }

    fn note(&mut self, f: impl FnOnce() -> String) {
        if let Some(notes) = &mut self.notes {
            notes.push(f());
        }
    }

    fn take(&mut self) -> Vec<String> {
        self.notes.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

/// A chart resolved against the profiles of the fields it references.
pub struct Facts<'a> {
    spec: &'a ChartSpec,
    slots: [Option<(&'a Encoding, Option<FieldProfile>)>; 7],
    overlap: Option<bool>,
}

fn slot(channel: Channel) -> usize {
    Channel::ALL
        .iter()
        .position(|c| *c == channel)
        .expect("channel is listed")
}

fn describe(e: &Encoding) -> String {
    let mut s = e.scale.as_str().to_owned();
    if e.binned {
        s.push_str(", binned");
    }
    s
}

impl<'a> Facts<'a> {
    /// Resolve `spec` against `table`, profiling referenced fields through
    /// `profiles` when given.
    pub fn new(
        spec: &'a ChartSpec,
        table: &DataTable,
        profiles: Option<&TableProfile>,
    ) -> Result<Self, DataError> {
        let mut slots: [Option<(&Encoding, Option<FieldProfile>)>; 7] = Default::default();
        for e in &spec.encodings {
            let profile = match (&e.field, profiles) {
                (None, _) => None,
                (Some(f), Some(cache)) => Some(
                    cache
                        .get(f)
                        .cloned()
                        .ok_or_else(|| DataError::UnknownColumn(f.clone()))?,
                ),
                (Some(f), None) => Some(profile_field(table, f)?),
            };
            slots[slot(e.channel)] = Some((e, profile));
        }
        let overlap = match spec.continuous_by_discrete() {
            Some(_) => Some(detect_overlap(spec, table)?),
            None => None,
        };
        Ok(Facts {
            spec,
            slots,
            overlap,
        })
    }

    fn enc(&self, channel: Channel) -> Option<&'a Encoding> {
        self.slots[slot(channel)].as_ref().map(|(e, _)| *e)
    }

    fn profile(&self, channel: Channel) -> Option<&FieldProfile> {
        self.slots[slot(channel)]
            .as_ref()
            .and_then(|(_, p)| p.as_ref())
    }

    fn mark_in(&self, marks: &[MarkType], ev: &mut Evidence) -> bool {
        ev.note(|| format!("mark = {}", self.spec.mark));
        marks.contains(&self.spec.mark)
    }

    fn present(&self, channel: Channel, ev: &mut Evidence) -> bool {
        match self.enc(channel) {
            Some(e) => {
                ev.note(|| match &e.field {
                    Some(f) => format!("{channel} encodes field `{f}`"),
                    None => format!("{channel} is encoded"),
                });
                true
            }
            None => {
                ev.note(|| format!("no {channel} channel"));
                false
            }
        }
    }

    fn absent(&self, channel: Channel, ev: &mut Evidence) -> bool {
        !self.present(channel, ev)
    }

    fn continuous(&self, channel: Channel, ev: &mut Evidence) -> bool {
        match self.enc(channel) {
            Some(e) => {
                ev.note(|| {
                    let kind = if e.is_continuous() {
                        "continuous"
                    } else {
                        "discrete"
                    };
                    format!("{channel} is {kind} ({})", describe(e))
                });
                e.is_continuous()
            }
            None => {
                ev.note(|| format!("no {channel} channel"));
                false
            }
        }
    }

    fn discrete(&self, channel: Channel, ev: &mut Evidence) -> bool {
        match self.enc(channel) {
            Some(_) => !self.continuous(channel, ev),
            None => {
                ev.note(|| format!("no {channel} channel"));
                false
            }
        }
    }

    fn scale(&self, channel: Channel, scale: ScaleType, ev: &mut Evidence) -> bool {
        match self.enc(channel) {
            Some(e) => {
                ev.note(|| format!("{channel} scale = {}", e.scale));
                e.scale == scale
            }
            None => {
                ev.note(|| format!("no {channel} channel"));
                false
            }
        }
    }

    fn any_scale(&self, scale: ScaleType, ev: &mut Evidence) -> bool {
        let hits: Vec<Channel> = self
            .spec
            .encodings
            .iter()
            .filter(|e| e.scale == scale)
            .map(|e| e.channel)
            .collect();
        ev.note(|| match hits.as_slice() {
            [] => format!("no encoding uses a {scale} scale"),
            hs => format!("{scale} scale on {}", join(hs)),
        });
        !hits.is_empty()
    }

    fn cardinality_gt(&self, channel: Channel, threshold: usize, ev: &mut Evidence) -> bool {
        match self.profile(channel) {
            Some(p) => {
                ev.note(|| {
                    format!(
                        "{channel} field `{}` has cardinality {} (threshold {threshold})",
                        p.name, p.cardinality
                    )
                });
                p.cardinality > threshold
            }
            None => {
                ev.note(|| format!("{channel} has no field"));
                false
            }
        }
    }

    fn scale_cardinality_gt(&self, scale: ScaleType, threshold: usize, ev: &mut Evidence) -> bool {
        let mut found = false;
        for e in self.spec.encodings.iter().filter(|e| e.scale == scale) {
            if let Some(p) = self.profile(e.channel) {
                ev.note(|| {
                    format!(
                        "{} ({scale}) field `{}` has cardinality {}",
                        e.channel, p.name, p.cardinality
                    )
                });
                found |= p.cardinality > threshold;
            }
        }
        if !found {
            ev.note(|| format!("no {scale} field exceeds cardinality {threshold}"));
        }
        found
    }

    fn mixed_sign(&self, channel: Channel, ev: &mut Evidence) -> bool {
        match self.profile(channel) {
            Some(p) => {
                ev.note(|| format!("`{}` min = {:?}, max = {:?}", p.name, p.min, p.max));
                p.has_negative && p.has_positive
            }
            None => {
                ev.note(|| format!("{channel} has no field"));
                false
            }
        }
    }

    fn field_uses(&self) -> Vec<(&'a str, usize)> {
        let mut counts: Vec<(&str, usize)> = Vec::new();
        for f in self.spec.fields() {
            match counts.iter_mut().find(|(n, _)| *n == f) {
                Some((_, c)) => *c += 1,
                None => counts.push((f, 1)),
            }
        }
        counts
    }

    fn field_used(&self, accept: fn(usize) -> bool, ev: &mut Evidence) -> bool {
        let uses = self.field_uses();
        ev.note(|| {
            uses.iter()
                .map(|(f, c)| format!("`{f}` used {c}x"))
                .collect::<Vec<_>>()
                .join(", ")
        });
        uses.iter().any(|(_, c)| accept(*c))
    }

    fn count_non_positional(&self, ev: &mut Evidence) -> usize {
        let hits: Vec<Channel> = self
            .spec
            .encodings
            .iter()
            .map(|e| e.channel)
            .filter(|c| !c.is_positional())
            .collect();
        ev.note(|| format!("non-positional channels: [{}]", join(&hits)));
        hits.len()
    }

    fn stacked(&self) -> Option<&'a Encoding> {
        self.spec.encodings.iter().find(|e| e.stacked)
    }
}

fn join(channels: &[Channel]) -> String {
    channels
        .iter()
        .map(|c| c.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

type Check = fn(&Facts, &mut Evidence) -> bool;

struct Clause {
    text: &'static str,
    check: Check,
}

struct Rule {
    name: &'static str,
    category: Category,
    clauses: &'static [Clause],
}

macro_rules! clause {
    ($text:expr, $check:expr) => {
        Clause {
            text: $text,
            check: $check,
        }
    };
}

use Category as Cat;
use Channel::{Color, Detail, Shape, Size, X, Y};
use MarkType::{Area, Bar, Line, Point, Rect, Text, Tick};
use ScaleType::{Categorical, Linear, Log, Ordinal};

const IS_CBD: Clause = clause!("x/y relationship is continuous by discrete", |f, ev| {
    let hit = f.overlap.is_some();
    ev.note(|| {
        let show = |c| f.enc(c).map_or_else(|| "absent".to_owned(), describe);
        format!("x: {}, y: {}", show(X), show(Y))
    });
    hit
});
const OVERLAP: Clause = clause!("overlap is detected", |f, ev| {
    ev.note(|| format!("overlap = {:?}", f.overlap));
    f.overlap == Some(true)
});
const NO_OVERLAP: Clause = clause!("no overlap is detected", |f, ev| {
    ev.note(|| format!("overlap = {:?}", f.overlap));
    f.overlap == Some(false)
});
const X_CONT: Clause = clause!("x is continuous", |f, ev| f.continuous(X, ev));
const Y_CONT: Clause = clause!("y is continuous", |f, ev| f.continuous(Y, ev));
const X_DISC: Clause = clause!("x is discrete", |f, ev| f.discrete(X, ev));
const Y_DISC: Clause = clause!("y is discrete", |f, ev| f.discrete(Y, ev));

const fn rule(name: &'static str, category: Category, clauses: &'static [Clause]) -> Rule {
    Rule {
        name,
        category,
        clauses,
    }
}

static RULES: [Rule; CATALOG_SIZE] = [
    // encoding
    rule(
        "size_negative",
        Cat::Encoding,
        &[
            clause!("size channel is used", |f, ev| f.present(Size, ev)),
            clause!(
                "size field has both negative and positive values",
                |f, ev| f.mixed_sign(Size, ev)
            ),
        ],
    ),
    rule(
        "shape_without_point",
        Cat::Encoding,
        &[
            clause!("shape channel is used", |f, ev| f.present(Shape, ev)),
            clause!("mark is not point", |f, ev| !f.mark_in(&[Point], ev)),
        ],
    ),
    rule(
        "size_without_point_text",
        Cat::Encoding,
        &[
            clause!("size channel is used", |f, ev| f.present(Size, ev)),
            clause!("mark is neither point nor text", |f, ev| !f
                .mark_in(&[Point, Text], ev)),
        ],
    ),
    rule(
        "same_field_x_and_y",
        Cat::Encoding,
        &[clause!("x and y encode the same field", |f, ev| {
            let fx = f.enc(X).and_then(|e| e.field.as_deref());
            let fy = f.enc(Y).and_then(|e| e.field.as_deref());
            ev.note(|| format!("x field = {fx:?}, y field = {fy:?}"));
            fx.is_some() && fx == fy
        })],
    ),
    rule(
        "same_field",
        Cat::Encoding,
        &[clause!("some field is used exactly twice", |f, ev| f
            .field_used(|c| c == 2, ev))],
    ),
    rule(
        "same_field_grt3",
        Cat::Encoding,
        &[clause!(
            "some field is used three or more times",
            |f, ev| f.field_used(|c| c >= 3, ev)
        )],
    ),
    rule(
        "rect_without_d_d",
        Cat::Encoding,
        &[
            clause!("mark is rect", |f, ev| f.mark_in(&[Rect], ev)),
            clause!("x or y is continuous", |f, ev| f.continuous(X, ev)
                | f.continuous(Y, ev)),
        ],
    ),
    rule(
        "number_categorical",
        Cat::Encoding,
        &[clause!(
            "a number field uses a categorical scale",
            |f, ev| {
                let hits: Vec<Channel> = f
                    .spec
                    .encodings
                    .iter()
                    .filter(|e| {
                        e.scale == Categorical
                            && f.profile(e.channel)
                                .is_some_and(|p| p.kind == FieldKind::Number)
                    })
                    .map(|e| e.channel)
                    .collect();
                ev.note(|| format!("categorical number fields on [{}]", join(&hits)));
                !hits.is_empty()
            }
        )],
    ),
    rule(
        "only_discrete",
        Cat::Encoding,
        &[clause!("no encoding is continuous", |f, ev| {
            let cont: Vec<Channel> = f
                .spec
                .encodings
                .iter()
                .filter(|e| e.is_continuous())
                .map(|e| e.channel)
                .collect();
            ev.note(|| format!("continuous encodings: [{}]", join(&cont)));
            cont.is_empty()
        })],
    ),
    rule(
        "only_y",
        Cat::Encoding,
        &[
            clause!("y channel is used", |f, ev| f.present(Y, ev)),
            clause!("x channel is absent", |f, ev| f.absent(X, ev)),
        ],
    ),
    rule(
        "multi_non_pos",
        Cat::Encoding,
        &[clause!("more than one non-positional channel", |f, ev| f
            .count_non_positional(ev)
            > 1)],
    ),
    rule(
        "non_pos_used_before_pos",
        Cat::Encoding,
        &[
            clause!("a non-positional channel is used", |f, ev| f
                .count_non_positional(ev)
                > 0),
            clause!("x channel is absent", |f, ev| f.absent(X, ev)),
            clause!("y channel is absent", |f, ev| f.absent(Y, ev)),
        ],
    ),
    // mark
    rule(
        "line_area_with_discrete",
        Cat::Mark,
        &[
            clause!("mark is line or area", |f, ev| f.mark_in(&[Line, Area], ev)),
            X_DISC,
            Y_DISC,
        ],
    ),
    rule(
        "bar_tick_continuous_x_y",
        Cat::Mark,
        &[
            clause!("mark is bar or tick", |f, ev| f.mark_in(&[Bar, Tick], ev)),
            X_CONT,
            Y_CONT,
        ],
    ),
    rule(
        "bar_tick_area_line_without_continuous_x_y",
        Cat::Mark,
        &[
            clause!("mark is bar, tick, area or line", |f, ev| f
                .mark_in(&[Bar, Tick, Area, Line], ev)),
            clause!("x is not continuous", |f, ev| !f.continuous(X, ev)),
            clause!("y is not continuous", |f, ev| !f.continuous(Y, ev)),
        ],
    ),
    rule(
        "area_bar_with_log",
        Cat::Mark,
        &[
            clause!("mark is bar or area", |f, ev| f.mark_in(&[Bar, Area], ev)),
            clause!("x or y uses a log scale", |f, ev| f.scale(X, Log, ev)
                | f.scale(Y, Log, ev)),
        ],
    ),
    rule(
        "c_c_point",
        Cat::Mark,
        &[
            X_CONT,
            Y_CONT,
            clause!("mark is point", |f, ev| f.mark_in(&[Point], ev)),
        ],
    ),
    rule(
        "c_c_line",
        Cat::Mark,
        &[
            X_CONT,
            Y_CONT,
            clause!("mark is line", |f, ev| f.mark_in(&[Line], ev)),
        ],
    ),
    rule(
        "c_c_area",
        Cat::Mark,
        &[
            X_CONT,
            Y_CONT,
            clause!("mark is area", |f, ev| f.mark_in(&[Area], ev)),
        ],
    ),
    rule(
        "d_d_point",
        Cat::Mark,
        &[
            X_DISC,
            Y_DISC,
            clause!("mark is point", |f, ev| f.mark_in(&[Point], ev)),
        ],
    ),
    rule(
        "d_d_rect",
        Cat::Mark,
        &[
            X_DISC,
            Y_DISC,
            clause!("mark is rect", |f, ev| f.mark_in(&[Rect], ev)),
        ],
    ),
    rule(
        "c_d_overlap_point",
        Cat::Mark,
        &[
            IS_CBD,
            OVERLAP,
            clause!("mark is point", |f, ev| f.mark_in(&[Point], ev)),
        ],
    ),
    rule(
        "c_d_overlap_bar",
        Cat::Mark,
        &[
            IS_CBD,
            OVERLAP,
            clause!("mark is bar", |f, ev| f.mark_in(&[Bar], ev)),
        ],
    ),
    rule(
        "c_d_overlap_line",
        Cat::Mark,
        &[
            IS_CBD,
            OVERLAP,
            clause!("mark is line", |f, ev| f.mark_in(&[Line], ev)),
        ],
    ),
    rule(
        "c_d_overlap_area",
        Cat::Mark,
        &[
            IS_CBD,
            OVERLAP,
            clause!("mark is area", |f, ev| f.mark_in(&[Area], ev)),
        ],
    ),
    rule(
        "c_d_overlap_tick",
        Cat::Mark,
        &[
            IS_CBD,
            OVERLAP,
            clause!("mark is tick", |f, ev| f.mark_in(&[Tick], ev)),
        ],
    ),
    rule(
        "c_d_no_overlap_point",
        Cat::Mark,
        &[
            IS_CBD,
            NO_OVERLAP,
            clause!("mark is point", |f, ev| f.mark_in(&[Point], ev)),
        ],
    ),
    rule(
        "c_d_no_overlap_bar",
        Cat::Mark,
        &[
            IS_CBD,
            NO_OVERLAP,
            clause!("mark is bar", |f, ev| f.mark_in(&[Bar], ev)),
        ],
    ),
    rule(
        "c_d_no_overlap_line",
        Cat::Mark,
        &[
            IS_CBD,
            NO_OVERLAP,
            clause!("mark is line", |f, ev| f.mark_in(&[Line], ev)),
        ],
    ),
    rule(
        "c_d_no_overlap_area",
        Cat::Mark,
        &[
            IS_CBD,
            NO_OVERLAP,
            clause!("mark is area", |f, ev| f.mark_in(&[Area], ev)),
        ],
    ),
    // stack
    rule(
        "no_stack_with_bar_area_discrete_color",
        Cat::Stack,
        &[
            clause!("mark is bar or area", |f, ev| f.mark_in(&[Bar, Area], ev)),
            clause!("color is discrete or binned", |f, ev| f.discrete(Color, ev)),
            clause!("no encoding is stacked", |f, ev| {
                let s = f.stacked();
                ev.note(|| {
                    s.map_or_else(
                        || "nothing stacked".into(),
                        |e| format!("{} is stacked", e.channel),
                    )
                });
                s.is_none()
            }),
        ],
    ),
    rule(
        "stack_without_discrete_color_or_detail",
        Cat::Stack,
        &[
            clause!("stacking is enabled", |f, ev| {
                let s = f.stacked();
                ev.note(|| {
                    s.map_or_else(
                        || "nothing stacked".into(),
                        |e| format!("{} is stacked", e.channel),
                    )
                });
                s.is_some()
            }),
            clause!("color is not discrete or binned", |f, ev| !f
                .discrete(Color, ev)),
            clause!("detail channel is absent", |f, ev| f.absent(Detail, ev)),
        ],
    ),
    rule(
        "stack_discrete",
        Cat::Stack,
        &[clause!(
            "a stacked channel is discrete or binned",
            |f, ev| match f.stacked() {
                Some(e) => {
                    ev.note(|| format!("{} is stacked ({})", e.channel, describe(e)));
                    e.is_discrete()
                }
                None => {
                    ev.note(|| "nothing stacked".into());
                    false
                }
            }
        )],
    ),
    // scale
    rule(
        "log_scale",
        Cat::Scale,
        &[clause!("some encoding uses a log scale", |f, ev| f
            .any_scale(Log, ev))],
    ),
    rule(
        "log_x",
        Cat::Scale,
        &[clause!("x uses a log scale", |f, ev| f.scale(X, Log, ev))],
    ),
    rule(
        "log_y",
        Cat::Scale,
        &[clause!("y uses a log scale", |f, ev| f.scale(Y, Log, ev))],
    ),
    rule(
        "ordinal_scale",
        Cat::Scale,
        &[clause!("some encoding uses an ordinal scale", |f, ev| f
            .any_scale(Ordinal, ev))],
    ),
    rule(
        "ordinal_x",
        Cat::Scale,
        &[clause!("x uses an ordinal scale", |f, ev| f.scale(X, Ordinal, ev))],
    ),
    rule(
        "ordinal_y",
        Cat::Scale,
        &[clause!("y uses an ordinal scale", |f, ev| f.scale(Y, Ordinal, ev))],
    ),
    rule(
        "categorical_scale",
        Cat::Scale,
        &[clause!(
            "some encoding uses a categorical scale",
            |f, ev| f.any_scale(Categorical, ev)
        )],
    ),
    rule(
        "categorical_color",
        Cat::Scale,
        &[clause!("color uses a categorical scale", |f, ev| f.scale(
            Color,
            Categorical,
            ev
        ))],
    ),
    rule(
        "linear_color",
        Cat::Scale,
        &[clause!("color uses a linear scale", |f, ev| f
            .scale(Color, Linear, ev))],
    ),
    rule(
        "linear_size",
        Cat::Scale,
        &[clause!("size uses a linear scale", |f, ev| f
            .scale(Size, Linear, ev))],
    ),
    rule(
        "log_color",
        Cat::Scale,
        &[clause!("color uses a log scale", |f, ev| f.scale(Color, Log, ev))],
    ),
    rule(
        "log_size",
        Cat::Scale,
        &[clause!("size uses a log scale", |f, ev| f.scale(Size, Log, ev))],
    ),
    rule(
        "ordinal_color",
        Cat::Scale,
        &[clause!("color uses an ordinal scale", |f, ev| f
            .scale(Color, Ordinal, ev))],
    ),
    rule(
        "ordinal_size",
        Cat::Scale,
        &[clause!("size uses an ordinal scale", |f, ev| f
            .scale(Size, Ordinal, ev))],
    ),
    rule(
        "ordinal_shape",
        Cat::Scale,
        &[clause!("shape uses an ordinal scale", |f, ev| f
            .scale(Shape, Ordinal, ev))],
    ),
    // data
    rule(
        "high_cardinality_ordinal",
        Cat::Data,
        &[clause!("an ordinal field has cardinality > 30", |f, ev| f
            .scale_cardinality_gt(Ordinal, 30, ev))],
    ),
    rule(
        "high_cardinality_categorical_grt10",
        Cat::Data,
        &[clause!(
            "a categorical field has cardinality > 10",
            |f, ev| f.scale_cardinality_gt(Categorical, 10, ev)
        )],
    ),
    rule(
        "high_cardinality_shape",
        Cat::Data,
        &[clause!("shape field has cardinality > 8", |f, ev| f
            .cardinality_gt(Shape, 8, ev))],
    ),
    rule(
        "high_cardinality_size",
        Cat::Data,
        &[
            clause!("size channel is used", |f, ev| f.present(Size, ev)),
            clause!(
                "a continuous x or y field has cardinality > 100",
                |f, ev| {
                    (f.continuous(X, ev) && f.cardinality_gt(X, 100, ev))
                        | (f.continuous(Y, ev) && f.cardinality_gt(Y, 100, ev))
                }
            ),
        ],
    ),
    rule(
        "horizontal_scrolling_x",
        Cat::Data,
        &[
            X_DISC,
            clause!("x field has cardinality > 50", |f, ev| f
                .cardinality_gt(X, 50, ev)),
        ],
    ),
    rule(
        "polar_coordinate",
        Cat::Data,
        &[clause!("coordinates are polar", |f, ev| {
            ev.note(|| format!("coordinates = {:?}", f.spec.coordinates));
            f.spec.coordinates == Coordinates::Polar
        })],
    ),
];

impl Rule {
    fn fires(&self, facts: &Facts) -> bool {
        let mut ev = Evidence::silent();
        self.clauses.iter().all(|c| (c.check)(facts, &mut ev))
    }
}

/// Every rule `facts` satisfies.
pub fn violations(facts: &Facts) -> ViolationSet {
    let mut out = ViolationSet::new();
    for rule in &CATALOG.rules {
        if rule.fires(facts) {
            out.insert(rule.name);
        }
    }
    out
}

/// The ground-truth violation set of `spec` over `table`.
pub fn lint(spec: &ChartSpec, table: &DataTable) -> Result<ViolationSet, DataError> {
    Ok(violations(&Facts::new(spec, table, None)?))
}

/// Lints many charts over one table, profiling its columns once.
pub struct Linter<'t> {
    table: &'t DataTable,
    profiles: TableProfile,
}

impl<'t> Linter<'t> {
    pub fn new(table: &'t DataTable) -> Self {
        Linter {
            table,
            profiles: TableProfile::new(table),
        }
    }

    pub fn table(&self) -> &'t DataTable {
        self.table
    }

    pub fn lint(&self, spec: &ChartSpec) -> Result<ViolationSet, DataError> {
        Ok(violations(&Facts::new(
            spec,
            self.table,
            Some(&self.profiles),
        )?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClauseReport {
    pub clause: &'static str,
    pub holds: bool,
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Explanation {
    pub rule: &'static str,
    pub fires: bool,
    pub clauses: Vec<ClauseReport>,
}

impl fmt::Display for Explanation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.fires { "fires" } else { "does not fire" };
        writeln!(f, "{}: {verdict}", self.rule)?;
        for c in &self.clauses {
            let mark = if c.holds { "x" } else { " " };
            write!(f, "  [{mark}] {}", c.clause)?;
            if !c.evidence.is_empty() {
                write!(f, " ({})", c.evidence.join("; "))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Evaluate one rule clause by clause. All clauses are evaluated, even after
/// one fails, so the report is complete.
pub fn explain(
    spec: &ChartSpec,
    table: &DataTable,
    rule_name: &str,
) -> Result<Explanation, RuleError> {
    let idx = rule_index(rule_name).ok_or_else(|| RuleError::UnknownRule(rule_name.to_owned()))?;
    let rule = CATALOG.rules[idx];
    let facts = Facts::new(spec, table, None)?;
    let mut ev = Evidence::recording();
    let clauses: Vec<ClauseReport> = rule
        .clauses
        .iter()
        .map(|c| {
            let holds = (c.check)(&facts, &mut ev);
            ClauseReport {
                clause: c.text,
                holds,
                evidence: ev.take(),
            }
        })
        .collect();
    Ok(Explanation {
        rule: rule.name,
        fires: clauses.iter().all(|c| c.holds),
        clauses,
    })
}
