//! Shared test helpers: a naive rule oracle written straight from the rule
//! sentences, plus random table and chart generators.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vizlint::data::{load_csv, Cell, DataTable, FieldKind};
use vizlint::genset::{sample_spec, SamplerConfig};
use vizlint::spec::{Channel, ChartSpec, Coordinates, Encoding, MarkType, ScaleType};

pub fn table(name: &str, csv: &str) -> DataTable {
    load_csv(name, csv).expect("test table parses")
}

/// A table whose column `col_<k>` cycles through `k` distinct values for each `k` in `cards`.
pub fn cardinality_table(name: &str, rows: usize, cards: &[usize]) -> DataTable {
    let mut csv = String::from("id,v");
    for k in cards {
        csv.push_str(&format!(",num_{k},str_{k}"));
    }
    csv.push('\n');
    for i in 0..rows {
        csv.push_str(&format!("{},{}", i + 1, 2 * i + 1));
        for k in cards {
            csv.push_str(&format!(",{},s{}", i % k, i % k));
        }
        csv.push('\n');
    }
    table(name, &csv)
}

fn column<'t>(table: &'t DataTable, field: &str) -> Vec<&'t Cell> {
    let j = table
        .columns
        .iter()
        .position(|c| c == field)
        .expect("field exists");
    table.rows.iter().map(|r| &r[j]).collect()
}

fn kind(table: &DataTable, field: &str) -> FieldKind {
    let j = table
        .columns
        .iter()
        .position(|c| c == field)
        .expect("field exists");
    table.kinds[j]
}

fn text_of(cell: &Cell) -> Option<String> {
    match cell {
        Cell::Null => None,
        Cell::Number(v) if *v == 0.0 => Some("n:0".into()),
        Cell::Number(v) => Some(format!("n:{v}")),
        Cell::Text(s) => Some(format!("s:{s}")),
    }
}

fn cardinality(table: &DataTable, field: &str) -> usize {
    column(table, field)
        .into_iter()
        .filter_map(text_of)
        .collect::<HashSet<_>>()
        .len()
}

fn numbers(table: &DataTable, field: &str) -> Vec<f64> {
    column(table, field)
        .into_iter()
        .filter_map(|c| match c {
            Cell::Number(v) => Some(*v),
            _ => None,
        })
        .collect()
}

/// Linear or log, and not binned.
fn is_cont(e: &Encoding) -> bool {
    matches!(e.scale, ScaleType::Linear | ScaleType::Log) && !e.binned
}

struct View<'a> {
    spec: &'a ChartSpec,
    table: &'a DataTable,
}

impl<'a> View<'a> {
    fn get(&self, c: Channel) -> Option<&'a Encoding> {
        self.spec.encodings.iter().find(|e| e.channel == c)
    }
    fn used(&self, c: Channel) -> bool {
        self.get(c).is_some()
    }
    fn cont(&self, c: Channel) -> bool {
        self.get(c).is_some_and(is_cont)
    }
    fn disc(&self, c: Channel) -> bool {
        self.get(c).is_some_and(|e| !is_cont(e))
    }
    fn scale_is(&self, c: Channel, s: ScaleType) -> bool {
        self.get(c).is_some_and(|e| e.scale == s)
    }
    fn field(&self, c: Channel) -> Option<&'a str> {
        self.get(c).and_then(|e| e.field.as_deref())
    }
    fn card(&self, c: Channel) -> usize {
        self.field(c).map_or(0, |f| cardinality(self.table, f))
    }
    fn mark(&self, marks: &[MarkType]) -> bool {
        marks.contains(&self.spec.mark)
    }
    fn non_positional(&self) -> usize {
        self.spec
            .encodings
            .iter()
            .filter(|e| !matches!(e.channel, Channel::X | Channel::Y))
            .count()
    }

    fn c_by_d(&self) -> bool {
        (self.cont(Channel::X) && self.disc(Channel::Y))
            || (self.disc(Channel::X) && self.cont(Channel::Y))
    }

    fn group_key(&self, e: &Encoding, row: usize) -> Option<String> {
        let f = e.field.as_deref()?;
        let cell = column(self.table, f)[row];
        if let (true, FieldKind::Number, Cell::Number(v)) = (e.binned, kind(self.table, f), cell) {
            let ns = numbers(self.table, f);
            let lo = ns.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let b = if hi <= lo {
                0.0
            } else {
                ((v - lo) / (hi - lo) * 10.0).floor().clamp(0.0, 9.0)
            };
            return Some(format!("bin:{b}"));
        }
        text_of(cell)
    }

    /// Some discrete-axis slot (split by discrete non-positional channels) holds two or more rows.
    fn overlap(&self) -> bool {
        if self.spec.encodings.iter().any(|e| e.aggregate.is_some()) {
            return false;
        }
        let axis = if self.disc(Channel::X) {
            self.get(Channel::X)
        } else {
            self.get(Channel::Y)
        }
        .unwrap();
        let mut seen = HashSet::new();
        for row in 0..self.table.rows.len() {
            let mut key = match (&axis.field, self.group_key(axis, row)) {
                (None, _) => vec!["*".to_owned()],
                (Some(_), Some(k)) => vec![k],
                (Some(_), None) => continue,
            };
            for e in &self.spec.encodings {
                if !matches!(e.channel, Channel::X | Channel::Y) && !is_cont(e) && e.field.is_some()
                {
                    key.push(self.group_key(e, row).unwrap_or_else(|| "null".into()));
                }
            }
            if !seen.insert(key) {
                return true;
            }
        }
        false
    }
}

/// Every rule sentence applied literally to `spec` over `table`.
pub fn naive_lint(spec: &ChartSpec, table: &DataTable) -> BTreeSet<String> {
    use Channel::*;
    use MarkType::{Area, Bar, Line, Point, Rect, Tick};
    use ScaleType::*;
    let v = View { spec, table };
    let mut out = BTreeSet::new();
    let mut fire = |name: &str, cond: bool| {
        if cond {
            out.insert(name.to_owned());
        }
    };

    // encoding
    fire(
        "size_negative",
        v.field(Size).is_some_and(|f| {
            let ns = numbers(table, f);
            ns.iter().any(|x| *x < 0.0) && ns.iter().any(|x| *x > 0.0)
        }),
    );
    fire("shape_without_point", v.used(Shape) && spec.mark != Point);
    fire(
        "size_without_point_text",
        v.used(Size) && spec.mark != Point && spec.mark != MarkType::Text,
    );
    fire(
        "same_field_x_and_y",
        v.field(X).is_some() && v.field(X) == v.field(Y),
    );
    let fields: Vec<&str> = spec
        .encodings
        .iter()
        .filter_map(|e| e.field.as_deref())
        .collect();
    let uses = |f: &str| fields.iter().filter(|g| **g == f).count();
    fire("same_field", fields.iter().any(|f| uses(f) == 2));
    fire("same_field_grt3", fields.iter().any(|f| uses(f) >= 3));
    fire(
        "rect_without_d_d",
        spec.mark == Rect && (v.cont(X) || v.cont(Y)),
    );
    fire(
        "number_categorical",
        spec.encodings.iter().any(|e| {
            e.scale == Categorical
                && e.field
                    .as_deref()
                    .is_some_and(|f| kind(table, f) == FieldKind::Number)
        }),
    );
    fire("only_discrete", spec.encodings.iter().all(|e| !is_cont(e)));
    fire("multi_non_pos", v.non_positional() > 1);
    fire(
        "non_pos_used_before_pos",
        v.non_positional() > 0 && !v.used(X) && !v.used(Y),
    );
    fire("only_y", v.used(Y) && !v.used(X));

    // mark
    fire(
        "line_area_with_discrete",
        v.mark(&[Line, Area]) && v.disc(X) && v.disc(Y),
    );
    fire(
        "bar_tick_continuous_x_y",
        v.mark(&[Bar, Tick]) && v.cont(X) && v.cont(Y),
    );
    fire(
        "bar_tick_area_line_without_continuous_x_y",
        v.mark(&[Bar, Tick, Area, Line]) && !v.cont(X) && !v.cont(Y),
    );
    fire(
        "area_bar_with_log",
        v.mark(&[Bar, Area]) && (v.scale_is(X, Log) || v.scale_is(Y, Log)),
    );
    let cc = v.cont(X) && v.cont(Y);
    let dd = v.disc(X) && v.disc(Y);
    fire("c_c_point", cc && spec.mark == Point);
    fire("c_c_line", cc && spec.mark == Line);
    fire("c_c_area", cc && spec.mark == Area);
    fire("d_d_point", dd && spec.mark == Point);
    fire("d_d_rect", dd && spec.mark == Rect);
    if v.c_by_d() {
        let overlap = v.overlap();
        for (mark, name) in [
            (Point, "point"),
            (Bar, "bar"),
            (Line, "line"),
            (Area, "area"),
            (Tick, "tick"),
        ] {
            fire(&format!("c_d_overlap_{name}"), overlap && spec.mark == mark);
            if mark != Tick {
                fire(
                    &format!("c_d_no_overlap_{name}"),
                    !overlap && spec.mark == mark,
                );
            }
        }
    }

    // stack
    let stacked: Vec<&Encoding> = spec.encodings.iter().filter(|e| e.stacked).collect();
    fire(
        "no_stack_with_bar_area_discrete_color",
        v.mark(&[Bar, Area]) && v.disc(Color) && stacked.is_empty(),
    );
    fire(
        "stack_without_discrete_color_or_detail",
        !stacked.is_empty() && !v.disc(Color) && !v.used(Detail),
    );
    fire("stack_discrete", stacked.iter().any(|e| !is_cont(e)));

    // scale
    for (scale, name) in [
        (Log, "log"),
        (Ordinal, "ordinal"),
        (Categorical, "categorical"),
    ] {
        fire(
            &format!("{name}_scale"),
            spec.encodings.iter().any(|e| e.scale == scale),
        );
    }
    fire("log_x", v.scale_is(X, Log));
    fire("log_y", v.scale_is(Y, Log));
    fire("ordinal_x", v.scale_is(X, Ordinal));
    fire("ordinal_y", v.scale_is(Y, Ordinal));
    fire("linear_color", v.scale_is(Color, Linear));
    fire("linear_size", v.scale_is(Size, Linear));
    fire("log_color", v.scale_is(Color, Log));
    fire("log_size", v.scale_is(Size, Log));
    fire("ordinal_color", v.scale_is(Color, Ordinal));
    fire("ordinal_size", v.scale_is(Size, Ordinal));
    fire("ordinal_shape", v.scale_is(Shape, Ordinal));
    fire("categorical_color", v.scale_is(Color, Categorical));

    // data
    let with_scale_over = |s: ScaleType, t: usize| {
        spec.encodings.iter().any(|e| {
            e.scale == s
                && e.field
                    .as_deref()
                    .is_some_and(|f| cardinality(table, f) > t)
        })
    };
    fire("high_cardinality_ordinal", with_scale_over(Ordinal, 30));
    fire(
        "high_cardinality_categorical_grt10",
        with_scale_over(Categorical, 10),
    );
    fire("high_cardinality_shape", v.card(Shape) > 8);
    fire(
        "high_cardinality_size",
        v.used(Size) && ((v.cont(X) && v.card(X) > 100) || (v.cont(Y) && v.card(Y) > 100)),
    );
    fire("horizontal_scrolling_x", v.disc(X) && v.card(X) > 50);
    fire("polar_coordinate", spec.coordinates == Coordinates::Polar);
    out
}

/// A random table with mixed kinds, repeats, nulls and cardinalities near
/// the rule thresholds.
pub fn random_table<R: Rng>(rng: &mut R, name: &str) -> DataTable {
    let rows = *[1usize, 5, 12, 40, 60, 120]
        .get(rng.random_range(0..6))
        .unwrap();
    let ncols = rng.random_range(1..=6);
    let targets = [1usize, 2, 3, 8, 9, 10, 11, 30, 31, 50, 51, 100, 101, 120];
    let mut header = Vec::new();
    let mut cols: Vec<Vec<String>> = Vec::new();
    for c in 0..ncols {
        header.push(format!("c{c}"));
        let card = targets[rng.random_range(0..targets.len())].min(rows).max(1);
        let numeric = rng.random_bool(0.6);
        let signed = rng.random_bool(0.3);
        let null_p = if rng.random_bool(0.3) { 0.1 } else { 0.0 };
        let mut values = Vec::with_capacity(rows);
        for i in 0..rows {
            let k = if i < card {
                i
            } else {
                rng.random_range(0..card)
            };
            values.push(if i > 0 && rng.random_bool(null_p) {
                String::new()
            } else if numeric {
                let base = k as f64 * 1.5;
                format!(
                    "{}",
                    if signed {
                        base - card as f64 / 2.0
                    } else {
                        base + 1.0
                    }
                )
            } else {
                format!("v{k}")
            });
        }
        cols.push(values);
    }
    let mut csv = header.join(",");
    csv.push('\n');
    for i in 0..rows {
        let row: Vec<&str> = cols.iter().map(|c| c[i].as_str()).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    table(name, &csv)
}

/// `n` seeded (spec, table) pairs drawn over random and bundled tables.
pub fn random_pairs(seed: u64, n: usize) -> Vec<(ChartSpec, DataTable)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundled = vizlint::bundled::bundled_tables();
    let cfg = SamplerConfig {
        max_encodings: 5,
        bin_p: 0.3,
        aggregate_p: 0.15,
        stack_p: 0.3,
        polar_p: 0.1,
        ..SamplerConfig::default()
    };
    (0..n)
        .map(|i| {
            let table = if i % 3 == 0 {
                bundled[rng.random_range(0..bundled.len())].clone()
            } else {
                random_table(&mut rng, &format!("r{i}"))
            };
            (sample_spec(&mut rng, &table, &cfg), table)
        })
        .collect()
}

/// Shorthand encoding constructor.
pub fn enc(channel: Channel, field: &str, scale: ScaleType) -> Encoding {
    Encoding::new(channel, field, scale)
}
