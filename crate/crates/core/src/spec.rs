//! Chart model for the Vega-Lite subset the design rules quantify over, with
//! a strict parser, an emitter, and invariant validation.
//!
//! The accepted document shape is:
//!
//! ```json
//! {
//!   "$schema": "https://vega.github.io/schema/vega-lite/v5.json",
//!   "data": {"name": "cars", "values": [ ... ]},
//!   "mark": "bar",
//!   "coordinates": "polar",
//!   "encoding": {
//!     "x": {"field": "origin", "type": "ordinal"},
//!     "y": {"field": "mpg", "type": "quantitative", "aggregate": "mean", "scale": {"type": "log"}}
//!   }
//! }
//! ```
//!
//! Anything outside this vocabulary is rejected, never ignored.

use std::fmt;

use serde::de::{self, Deserializer, MapAccess, SeqAccess, Visitor};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const VEGA_LITE_SCHEMA: &str = "https://vega.github.io/schema/vega-lite/v5.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkType {
    Point,
    Bar,
    Line,
    Area,
    Tick,
    Rect,
    Text,
}

impl MarkType {
    pub const ALL: [MarkType; 7] = [
        MarkType::Point,
        MarkType::Bar,
        MarkType::Line,
        MarkType::Area,
        MarkType::Tick,
        MarkType::Rect,
        MarkType::Text,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MarkType::Point => "point",
            MarkType::Bar => "bar",
            MarkType::Line => "line",
            MarkType::Area => "area",
            MarkType::Tick => "tick",
            MarkType::Rect => "rect",
            MarkType::Text => "text",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == name)
    }
}

impl fmt::Display for MarkType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    X,
    Y,
    Color,
    Size,
    Shape,
    Text,
    Detail,
}

impl Channel {
    pub const ALL: [Channel; 7] = [
        Channel::X,
        Channel::Y,
        Channel::Color,
        Channel::Size,
        Channel::Shape,
        Channel::Text,
        Channel::Detail,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::X => "x",
            Channel::Y => "y",
            Channel::Color => "color",
            Channel::Size => "size",
            Channel::Shape => "shape",
            Channel::Text => "text",
            Channel::Detail => "detail",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == name)
    }

    /// Only `x` and `y` are positional.
    pub fn is_positional(self) -> bool {
        matches!(self, Channel::X | Channel::Y)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleType {
    Linear,
    Log,
    Ordinal,
    Categorical,
}

impl ScaleType {
    pub const ALL: [ScaleType; 4] = [
        ScaleType::Linear,
        ScaleType::Log,
        ScaleType::Ordinal,
        ScaleType::Categorical,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleType::Linear => "linear",
            ScaleType::Log => "log",
            ScaleType::Ordinal => "ordinal",
            ScaleType::Categorical => "categorical",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.as_str() == name)
    }

    pub fn is_quantitative(self) -> bool {
        matches!(self, ScaleType::Linear | ScaleType::Log)
    }

    /// The Vega-Lite field `type` this scale maps to.
    pub fn field_type(self) -> &'static str {
        match self {
            ScaleType::Linear | ScaleType::Log => "quantitative",
            ScaleType::Ordinal => "ordinal",
            ScaleType::Categorical => "nominal",
        }
    }
}

impl fmt::Display for ScaleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Count,
    Mean,
    Sum,
    Median,
    Min,
    Max,
}

impl Aggregate {
    pub const ALL: [Aggregate; 6] = [
        Aggregate::Count,
        Aggregate::Mean,
        Aggregate::Sum,
        Aggregate::Median,
        Aggregate::Min,
        Aggregate::Max,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregate::Count => "count",
            Aggregate::Mean => "mean",
            Aggregate::Sum => "sum",
            Aggregate::Median => "median",
            Aggregate::Min => "min",
            Aggregate::Max => "max",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Encoding {
    pub channel: Channel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub scale: ScaleType,
    #[serde(default)]
    pub binned: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregate>,
    #[serde(default)]
    pub stacked: bool,
}

impl Encoding {
    pub fn new(channel: Channel, field: impl Into<String>, scale: ScaleType) -> Self {
        Encoding {
            channel,
            field: Some(field.into()),
            scale,
            binned: false,
            aggregate: None,
            stacked: false,
        }
    }

    pub fn binned(mut self) -> Self {
        self.binned = true;
        self
    }

    pub fn stacked(mut self) -> Self {
        self.stacked = true;
        self
    }

    pub fn aggregate(mut self, aggregate: Aggregate) -> Self {
        self.aggregate = Some(aggregate);
        self
    }

    /// Linear or log, and not binned.
    pub fn is_continuous(&self) -> bool {
        self.scale.is_quantitative() && !self.binned
    }

    pub fn is_discrete(&self) -> bool {
        !self.is_continuous()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coordinates {
    #[default]
    Cartesian,
    Polar,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChartSpec {
    pub mark: MarkType,
    pub encodings: Vec<Encoding>,
    #[serde(default)]
    pub coordinates: Coordinates,
    pub data_ref: String,
}

impl ChartSpec {
    pub fn new(mark: MarkType, data_ref: impl Into<String>) -> Self {
        ChartSpec {
            mark,
            encodings: Vec::new(),
            coordinates: Coordinates::Cartesian,
            data_ref: data_ref.into(),
        }
    }

    pub fn with(mut self, encoding: Encoding) -> Self {
        self.encodings.push(encoding);
        self
    }

    pub fn polar(mut self) -> Self {
        self.coordinates = Coordinates::Polar;
        self
    }

    pub fn encoding(&self, channel: Channel) -> Option<&Encoding> {
        self.encodings.iter().find(|e| e.channel == channel)
    }

    pub fn has(&self, channel: Channel) -> bool {
        self.encoding(channel).is_some()
    }

    /// `(continuous, discrete)` when exactly one of x/y is continuous and the
    /// other is present and discrete, in either orientation.
    pub fn continuous_by_discrete(&self) -> Option<(&Encoding, &Encoding)> {
        let x = self.encoding(Channel::X)?;
        let y = self.encoding(Channel::Y)?;
        match (x.is_continuous(), y.is_continuous()) {
            (true, false) => Some((x, y)),
            (false, true) => Some((y, x)),
            _ => None,
        }
    }

    /// Field names referenced by any encoding, in encoding order, with repeats.
    pub fn fields(&self) -> impl Iterator<Item = &str> {
        self.encodings.iter().filter_map(|e| e.field.as_deref())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpecError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("unsupported feature: {0}")]
    UnsupportedFeature(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

/// A broken ChartSpec invariant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum Diagnostic {
    NonEmptyEncodings,
    UniqueChannel(Channel),
    SingleStack,
    StackOnPositionalOnly(Channel),
    FieldInTable(String),
}

impl Diagnostic {
    pub fn name(&self) -> &'static str {
        match self {
            Diagnostic::NonEmptyEncodings => "NonEmptyEncodings",
            Diagnostic::UniqueChannel(_) => "UniqueChannel",
            Diagnostic::SingleStack => "SingleStack",
            Diagnostic::StackOnPositionalOnly(_) => "StackOnPositionalOnly",
            Diagnostic::FieldInTable(_) => "FieldInTable",
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::NonEmptyEncodings => write!(f, "NonEmptyEncodings: chart has no encodings"),
            Diagnostic::UniqueChannel(c) => {
                write!(f, "UniqueChannel: channel `{c}` encoded more than once")
            }
            Diagnostic::SingleStack => write!(f, "SingleStack: more than one encoding is stacked"),
            Diagnostic::StackOnPositionalOnly(c) => {
                write!(
                    f,
                    "StackOnPositionalOnly: stacking on non-positional channel `{c}`"
                )
            }
            Diagnostic::FieldInTable(name) => {
                write!(f, "FieldInTable: field `{name}` not in data table")
            }
        }
    }
}

/// Structural invariants that do not need the data table.
pub fn validate(spec: &ChartSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if spec.encodings.is_empty() {
        out.push(Diagnostic::NonEmptyEncodings);
    }
    for channel in Channel::ALL {
        if spec
            .encodings
            .iter()
            .filter(|e| e.channel == channel)
            .count()
            > 1
        {
            out.push(Diagnostic::UniqueChannel(channel));
        }
    }
    if spec.encodings.iter().filter(|e| e.stacked).count() > 1 {
        out.push(Diagnostic::SingleStack);
    }
    for e in spec
        .encodings
        .iter()
        .filter(|e| e.stacked && !e.channel.is_positional())
    {
        out.push(Diagnostic::StackOnPositionalOnly(e.channel));
    }
    out
}

/// [`validate`] plus the check that every field names one of `columns`.
pub fn validate_with_columns<S: AsRef<str>>(spec: &ChartSpec, columns: &[S]) -> Vec<Diagnostic> {
    let mut out = validate(spec);
    let mut seen = Vec::new();
    for field in spec.fields() {
        if !columns.iter().any(|c| c.as_ref() == field) && !seen.contains(&field) {
            seen.push(field);
            out.push(Diagnostic::FieldInTable(field.to_owned()));
        }
    }
    out
}

/// A parsed chart document: the spec plus any inline data rows it carried.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartDocument {
    pub spec: ChartSpec,
    pub inline_values: Option<Vec<Map<String, Value>>>,
}

pub fn parse_spec(text: &str) -> Result<ChartSpec, SpecError> {
    parse_document(text).map(|d| d.spec)
}

pub fn parse_document(text: &str) -> Result<ChartDocument, SpecError> {
    let StrictValue(root) = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        if msg.starts_with(DUPLICATE_KEY) {
            SpecError::SchemaViolation(msg)
        } else {
            SpecError::MalformedDocument(msg)
        }
    })?;
    let root = match root {
        Value::Object(map) => map,
        other => {
            return Err(schema(format!(
                "top level must be an object, found {}",
                kind_of(&other)
            )))
        }
    };

    let mut mark = None;
    let mut encodings = None;
    let mut coordinates = Coordinates::Cartesian;
    let mut data = None;
    for (key, value) in &root {
        match key.as_str() {
            "$schema" => {
                if !value.is_string() {
                    return Err(schema("`$schema` must be a string"));
                }
            }
            "mark" => mark = Some(parse_mark(value)?),
            "encoding" => encodings = Some(parse_encodings(value)?),
            "coordinates" => coordinates = parse_coordinates(value)?,
            "data" => data = Some(parse_data(value)?),
            k if UNSUPPORTED_TOP_LEVEL.contains(&k) => {
                return Err(SpecError::UnsupportedFeature(format!("top-level `{k}`")))
            }
            k => return Err(schema(format!("unknown top-level key `{k}`"))),
        }
    }
    let mark = mark.ok_or_else(|| schema("missing `mark`"))?;
    let encodings = encodings.ok_or_else(|| schema("missing `encoding`"))?;
    let (data_ref, inline_values) = data.ok_or_else(|| schema("missing `data`"))?;

    let spec = ChartSpec {
        mark,
        encodings,
        coordinates,
        data_ref,
    };
    if let Some(first) = validate(&spec).into_iter().next() {
        return Err(SpecError::SchemaViolation(first.to_string()));
    }
    Ok(ChartDocument {
        spec,
        inline_values,
    })
}

const UNSUPPORTED_TOP_LEVEL: &[&str] = &[
    "layer",
    "facet",
    "repeat",
    "concat",
    "hconcat",
    "vconcat",
    "transform",
    "params",
    "selection",
    "projection",
    "resolve",
    "spacing",
    "columns",
    "config",
    "autosize",
    "padding",
    "width",
    "height",
    "title",
    "background",
    "view",
    "usermeta",
    "name",
    "datasets",
    "align",
    "bounds",
    "center",
    "spec",
    "description",
];

const UNSUPPORTED_MARKS: &[&str] = &[
    "boxplot",
    "errorbar",
    "errorband",
    "arc",
    "circle",
    "square",
    "rule",
    "trail",
    "geoshape",
    "image",
];

const UNSUPPORTED_CHANNELS: &[&str] = &[
    "x2",
    "y2",
    "xOffset",
    "yOffset",
    "theta",
    "theta2",
    "radius",
    "radius2",
    "longitude",
    "latitude",
    "longitude2",
    "latitude2",
    "opacity",
    "fillOpacity",
    "strokeOpacity",
    "strokeWidth",
    "strokeDash",
    "angle",
    "fill",
    "stroke",
    "key",
    "tooltip",
    "href",
    "url",
    "description",
    "order",
    "row",
    "column",
    "facet",
    "xError",
    "yError",
    "xError2",
    "yError2",
];

const UNSUPPORTED_CHANNEL_KEYS: &[&str] = &[
    "timeUnit",
    "sort",
    "axis",
    "legend",
    "title",
    "format",
    "formatType",
    "value",
    "datum",
    "condition",
    "impute",
    "band",
    "bandPosition",
    "header",
];

const UNSUPPORTED_SCALES: &[&str] = &[
    "pow",
    "sqrt",
    "symlog",
    "identity",
    "sequential",
    "time",
    "utc",
    "quantile",
    "quantize",
    "threshold",
    "bin-ordinal",
    "point",
    "band",
];

fn schema(msg: impl Into<String>) -> SpecError {
    SpecError::SchemaViolation(msg.into())
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn parse_mark(value: &Value) -> Result<MarkType, SpecError> {
    let name = match value {
        Value::String(s) => s.as_str(),
        Value::Object(map) => {
            for key in map.keys() {
                if key != "type" {
                    return Err(SpecError::UnsupportedFeature(format!(
                        "mark property `{key}`"
                    )));
                }
            }
            map.get("type")
                .and_then(Value::as_str)
                .ok_or_else(|| schema("mark object needs a string `type`"))?
        }
        other => {
            return Err(schema(format!(
                "`mark` must be a string, found {}",
                kind_of(other)
            )))
        }
    };
    if let Some(mark) = MarkType::from_name(name) {
        Ok(mark)
    } else if UNSUPPORTED_MARKS.contains(&name) {
        Err(SpecError::UnsupportedFeature(format!("mark `{name}`")))
    } else {
        Err(schema(format!("unknown mark `{name}`")))
    }
}

fn parse_coordinates(value: &Value) -> Result<Coordinates, SpecError> {
    match value.as_str() {
        Some("polar") => Ok(Coordinates::Polar),
        Some("cartesian") => Ok(Coordinates::Cartesian),
        _ => Err(schema(format!(
            "`coordinates` must be \"polar\" or \"cartesian\", found {value}"
        ))),
    }
}

type DataSection = (String, Option<Vec<Map<String, Value>>>);

fn parse_data(value: &Value) -> Result<DataSection, SpecError> {
    let map = value
        .as_object()
        .ok_or_else(|| schema("`data` must be an object"))?;
    let mut name = None;
    let mut values = None;
    for (key, v) in map {
        match key.as_str() {
            "name" => {
                name = Some(
                    v.as_str()
                        .ok_or_else(|| schema("`data.name` must be a string"))?
                        .to_owned(),
                )
            }
            "values" => {
                let rows = v
                    .as_array()
                    .ok_or_else(|| schema("`data.values` must be an array"))?;
                let mut out = Vec::with_capacity(rows.len());
                for row in rows {
                    match row {
                        Value::Object(obj) => out.push(obj.clone()),
                        other => {
                            return Err(schema(format!(
                                "inline data rows must be objects, found {}",
                                kind_of(other)
                            )))
                        }
                    }
                }
                values = Some(out);
            }
            "url" | "format" | "sequence" | "sphere" | "graticule" => {
                return Err(SpecError::UnsupportedFeature(format!(
                    "data source `{key}`"
                )))
            }
            k => return Err(schema(format!("unknown data key `{k}`"))),
        }
    }
    let name = name.ok_or_else(|| schema("`data` needs a `name`"))?;
    Ok((name, values))
}

fn parse_encodings(value: &Value) -> Result<Vec<Encoding>, SpecError> {
    let map = value
        .as_object()
        .ok_or_else(|| schema("`encoding` must be an object"))?;
    let mut out: Vec<Encoding> = Vec::with_capacity(map.len());
    for (key, def) in map {
        let channel = match Channel::from_name(key) {
            Some(c) => c,
            None if UNSUPPORTED_CHANNELS.contains(&key.as_str()) => {
                return Err(SpecError::UnsupportedFeature(format!("channel `{key}`")))
            }
            None => return Err(schema(format!("unknown channel `{key}`"))),
        };
        out.push(parse_channel_def(channel, def)?);
    }
    Ok(out)
}

fn parse_channel_def(channel: Channel, def: &Value) -> Result<Encoding, SpecError> {
    let map = def
        .as_object()
        .ok_or_else(|| schema(format!("encoding for `{channel}` must be an object")))?;
    let mut field = None;
    let mut field_type = None;
    let mut scale_type = None;
    let mut binned = false;
    let mut aggregate = None;
    let mut stacked = false;
    for (key, v) in map {
        match key.as_str() {
            "field" => {
                field = Some(
                    v.as_str()
                        .ok_or_else(|| schema(format!("`{channel}.field` must be a string")))?
                        .to_owned(),
                )
            }
            "type" => field_type = Some(parse_field_type(channel, v)?),
            "scale" => scale_type = parse_scale(channel, v)?,
            "bin" => {
                binned = match v {
                    Value::Bool(b) => *b,
                    Value::Null => false,
                    Value::Object(_) => true,
                    other => {
                        return Err(schema(format!(
                            "`{channel}.bin` must be boolean, found {}",
                            kind_of(other)
                        )))
                    }
                }
            }
            "aggregate" => {
                let name = v
                    .as_str()
                    .ok_or_else(|| schema(format!("`{channel}.aggregate` must be a string")))?;
                aggregate =
                    Some(Aggregate::from_name(name).ok_or_else(|| {
                        SpecError::UnsupportedFeature(format!("aggregate `{name}`"))
                    })?);
            }
            "stack" => {
                stacked = match v {
                    Value::Null | Value::Bool(false) => false,
                    Value::Bool(true) => true,
                    Value::String(s) if matches!(s.as_str(), "zero" | "normalize" | "center") => {
                        true
                    }
                    other => {
                        return Err(schema(format!("invalid `{channel}.stack` value {other}")))
                    }
                }
            }
            k if UNSUPPORTED_CHANNEL_KEYS.contains(&k) => {
                return Err(SpecError::UnsupportedFeature(format!(
                    "encoding property `{channel}.{k}`"
                )))
            }
            k => return Err(schema(format!("unknown encoding property `{channel}.{k}`"))),
        }
    }
    let scale = match (scale_type, field_type) {
        (Some(scale), Some(ty)) if scale.field_type() != ty => {
            return Err(schema(format!(
                "`{channel}` scale `{scale}` is incompatible with field type `{ty}`"
            )))
        }
        (Some(scale), _) => scale,
        (None, Some("quantitative")) => ScaleType::Linear,
        (None, Some("ordinal")) => ScaleType::Ordinal,
        (None, Some(_)) => ScaleType::Categorical,
        (None, None) => {
            return Err(schema(format!(
                "`{channel}` needs a `type` or `scale.type`"
            )))
        }
    };
    Ok(Encoding {
        channel,
        field,
        scale,
        binned,
        aggregate,
        stacked,
    })
}

fn parse_field_type(channel: Channel, v: &Value) -> Result<&'static str, SpecError> {
    match v.as_str() {
        Some("quantitative") => Ok("quantitative"),
        Some("ordinal") => Ok("ordinal"),
        Some("nominal") => Ok("nominal"),
        Some(t @ ("temporal" | "geojson")) => {
            Err(SpecError::UnsupportedFeature(format!("field type `{t}`")))
        }
        _ => Err(schema(format!("invalid `{channel}.type` {v}"))),
    }
}

fn parse_scale(channel: Channel, v: &Value) -> Result<Option<ScaleType>, SpecError> {
    let map = match v {
        Value::Null => return Ok(None),
        Value::Object(map) => map,
        other => {
            return Err(schema(format!(
                "`{channel}.scale` must be an object, found {}",
                kind_of(other)
            )))
        }
    };
    let mut out = None;
    for (key, value) in map {
        if key != "type" {
            return Err(SpecError::UnsupportedFeature(format!(
                "scale property `{channel}.scale.{key}`"
            )));
        }
        let name = value
            .as_str()
            .ok_or_else(|| schema(format!("`{channel}.scale.type` must be a string")))?;
        out = Some(match ScaleType::from_name(name) {
            Some(s) => s,
            None if UNSUPPORTED_SCALES.contains(&name) => {
                return Err(SpecError::UnsupportedFeature(format!(
                    "scale type `{name}`"
                )))
            }
            None => return Err(schema(format!("unknown scale type `{name}`"))),
        });
    }
    Ok(out)
}

/// Emit the Vega-Lite document for `spec` as a JSON value.
///
/// Scale tags map onto field types: linear and log become `quantitative`
/// (log adds `scale.type`), ordinal stays `ordinal`, categorical becomes
/// `nominal`. Bar and area charts get an explicit `"stack": null` on
/// unstacked continuous positional channels so the document does not rely on
/// Vega-Lite's implicit stacking.
pub fn emit_value(spec: &ChartSpec, inline_rows: Option<&[Map<String, Value>]>) -> Value {
    let mut root = Map::new();
    root.insert("$schema".into(), Value::from(VEGA_LITE_SCHEMA));
    let mut data = Map::new();
    data.insert("name".into(), Value::from(spec.data_ref.as_str()));
    if let Some(rows) = inline_rows {
        data.insert(
            "values".into(),
            Value::Array(rows.iter().cloned().map(Value::Object).collect()),
        );
    }
    root.insert("data".into(), Value::Object(data));
    root.insert("mark".into(), Value::from(spec.mark.as_str()));
    if spec.coordinates == Coordinates::Polar {
        root.insert("coordinates".into(), Value::from("polar"));
    }
    let implicit_stack = matches!(spec.mark, MarkType::Bar | MarkType::Area);
    let mut encoding = Map::new();
    for e in &spec.encodings {
        let mut def = Map::new();
        if let Some(field) = &e.field {
            def.insert("field".into(), Value::from(field.as_str()));
        }
        def.insert("type".into(), Value::from(e.scale.field_type()));
        if let Some(agg) = e.aggregate {
            def.insert("aggregate".into(), Value::from(agg.as_str()));
        }
        if e.binned {
            def.insert("bin".into(), Value::Bool(true));
        }
        if e.scale == ScaleType::Log {
            let mut scale = Map::new();
            scale.insert("type".into(), Value::from("log"));
            def.insert("scale".into(), Value::Object(scale));
        }
        if e.stacked {
            def.insert("stack".into(), Value::from("zero"));
        } else if implicit_stack && e.channel.is_positional() && e.is_continuous() {
            def.insert("stack".into(), Value::Null);
        }
        encoding.insert(e.channel.as_str().into(), Value::Object(def));
    }
    root.insert("encoding".into(), Value::Object(encoding));
    Value::Object(root)
}

/// Pretty-printed [`emit_value`].
pub fn emit_spec(spec: &ChartSpec, inline_rows: Option<&[Map<String, Value>]>) -> String {
    serde_json::to_string_pretty(&emit_value(spec, inline_rows))
        .expect("JSON values always serialize")
}

const DUPLICATE_KEY: &str = "duplicate key";

/// A `serde_json::Value` whose deserializer rejects repeated object keys.
struct StrictValue(Value);

impl<'de> Deserialize<'de> for StrictValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_any(StrictVisitor).map(StrictValue)
    }
}

struct StrictVisitor;

impl<'de> Visitor<'de> for StrictVisitor {
    type Value = Value;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a JSON value")
    }

    fn visit_bool<E>(self, v: bool) -> Result<Value, E> {
        Ok(Value::Bool(v))
    }

    fn visit_i64<E>(self, v: i64) -> Result<Value, E> {
        Ok(Value::from(v))
    }

    fn visit_u64<E>(self, v: u64) -> Result<Value, E> {
        Ok(Value::from(v))
    }

    fn visit_f64<E>(self, v: f64) -> Result<Value, E> {
        Ok(serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number))
    }

    fn visit_str<E>(self, v: &str) -> Result<Value, E> {
        Ok(Value::String(v.to_owned()))
    }

    fn visit_string<E>(self, v: String) -> Result<Value, E> {
        Ok(Value::String(v))
    }

    fn visit_unit<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_none<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_some<D: Deserializer<'de>>(self, d: D) -> Result<Value, D::Error> {
        StrictValue::deserialize(d).map(|v| v.0)
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Value, A::Error> {
        let mut out = Vec::new();
        while let Some(StrictValue(v)) = seq.next_element()? {
            out.push(v);
        }
        Ok(Value::Array(out))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Value, A::Error> {
        let mut map = Map::new();
        while let Some(key) = access.next_key::<String>()? {
            if map.contains_key(&key) {
                return Err(de::Error::custom(format!("{DUPLICATE_KEY} `{key}`")));
            }
            let StrictValue(v) = access.next_value()?;
            map.insert(key, v);
        }
        Ok(Value::Object(map))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bar_doc() -> &'static str {
        r#"{
            "data": {"name": "t"},
            "mark": "bar",
            "encoding": {
                "x": {"field": "cat", "type": "ordinal"},
                "y": {"field": "val", "type": "quantitative"}
            }
        }"#
    }

    #[test]
    fn parses_simple_bar() {
        let spec = parse_spec(bar_doc()).unwrap();
        assert_eq!(
            spec,
            ChartSpec::new(MarkType::Bar, "t")
                .with(Encoding::new(Channel::X, "cat", ScaleType::Ordinal))
                .with(Encoding::new(Channel::Y, "val", ScaleType::Linear))
        );
    }

    #[test]
    fn boxplot_is_unsupported() {
        let doc = r#"{"data":{"name":"t"},"mark":"boxplot","encoding":{"x":{"field":"a","type":"nominal"}}}"#;
        assert!(matches!(
            parse_spec(doc),
            Err(SpecError::UnsupportedFeature(_))
        ));
    }

    #[test]
    fn duplicate_channel_is_schema_violation() {
        let doc = r#"{"data":{"name":"t"},"mark":"bar","encoding":{
            "x":{"field":"a","type":"nominal"},"x":{"field":"b","type":"nominal"}}}"#;
        assert!(matches!(
            parse_spec(doc),
            Err(SpecError::SchemaViolation(_))
        ));
    }

    #[test]
    fn syntax_error_is_malformed() {
        assert!(matches!(
            parse_spec("{\"mark\": "),
            Err(SpecError::MalformedDocument(_))
        ));
    }

    #[test]
    fn unknown_keys_rejected() {
        let doc = r#"{"data":{"name":"t"},"mark":"bar","colour":1,"encoding":{"x":{"field":"a","type":"nominal"}}}"#;
        assert!(matches!(
            parse_spec(doc),
            Err(SpecError::SchemaViolation(_))
        ));
        let doc = r#"{"data":{"name":"t"},"mark":"bar","transform":[],"encoding":{"x":{"field":"a","type":"nominal"}}}"#;
        assert!(matches!(
            parse_spec(doc),
            Err(SpecError::UnsupportedFeature(_))
        ));
        let doc = r#"{"data":{"name":"t"},"mark":"bar","encoding":{"x":{"field":"a","type":"nominal","axis":null}}}"#;
        assert!(matches!(
            parse_spec(doc),
            Err(SpecError::UnsupportedFeature(_))
        ));
    }

    #[test]
    fn scale_and_type_must_agree() {
        let doc = r#"{"data":{"name":"t"},"mark":"bar","encoding":{"x":{"field":"a","type":"nominal","scale":{"type":"log"}}}}"#;
        assert!(matches!(
            parse_spec(doc),
            Err(SpecError::SchemaViolation(_))
        ));
        let doc = r#"{"data":{"name":"t"},"mark":"bar","encoding":{"x":{"field":"a","scale":{"type":"categorical"}}}}"#;
        assert_eq!(
            parse_spec(doc).unwrap().encodings[0].scale,
            ScaleType::Categorical
        );
    }

    #[test]
    fn stacking_on_color_rejected_at_parse() {
        let doc = r#"{"data":{"name":"t"},"mark":"bar","encoding":{"color":{"field":"a","type":"nominal","stack":true}}}"#;
        assert!(matches!(
            parse_spec(doc),
            Err(SpecError::SchemaViolation(_))
        ));
    }

    #[test]
    fn emitted_point_chart_is_quantitative() {
        let spec = ChartSpec::new(MarkType::Point, "t")
            .with(Encoding::new(Channel::X, "a", ScaleType::Linear))
            .with(Encoding::new(Channel::Y, "b", ScaleType::Linear));
        let v = emit_value(&spec, None);
        assert_eq!(v["mark"], "point");
        assert_eq!(v["encoding"]["x"]["type"], "quantitative");
        assert_eq!(v["encoding"]["y"]["type"], "quantitative");
    }

    #[test]
    fn stack_directive_survives_round_trip() {
        let spec = ChartSpec::new(MarkType::Bar, "t")
            .with(Encoding::new(Channel::X, "a", ScaleType::Ordinal))
            .with(Encoding::new(Channel::Y, "b", ScaleType::Linear).stacked());
        let doc = emit_spec(&spec, None);
        assert!(emit_value(&spec, None)["encoding"]["y"]
            .get("stack")
            .is_some());
        let back = parse_spec(&doc).unwrap();
        assert!(back.encoding(Channel::Y).unwrap().stacked);
        assert_eq!(back, spec);
    }

    #[test]
    fn round_trip_preserves_everything() {
        let spec = ChartSpec::new(MarkType::Area, "t")
            .polar()
            .with(Encoding::new(Channel::Y, "b", ScaleType::Log).aggregate(Aggregate::Sum))
            .with(Encoding::new(Channel::X, "a", ScaleType::Linear).binned())
            .with(Encoding {
                channel: Channel::Detail,
                field: None,
                scale: ScaleType::Categorical,
                binned: false,
                aggregate: Some(Aggregate::Count),
                stacked: false,
            });
        let mut rows = Map::new();
        rows.insert("a".into(), Value::from(1));
        let doc = parse_document(&emit_spec(&spec, Some(&[rows.clone()]))).unwrap();
        assert_eq!(doc.spec, spec);
        assert_eq!(doc.inline_values, Some(vec![rows]));
    }

    #[test]
    fn validate_examples() {
        let ok = ChartSpec::new(MarkType::Bar, "t")
            .with(Encoding::new(Channel::X, "a", ScaleType::Ordinal))
            .with(Encoding::new(Channel::Y, "b", ScaleType::Linear));
        assert!(validate(&ok).is_empty());
        assert_eq!(
            validate(&ChartSpec::new(MarkType::Bar, "t")),
            vec![Diagnostic::NonEmptyEncodings]
        );
        let bad = ChartSpec::new(MarkType::Bar, "t")
            .with(Encoding::new(Channel::Color, "a", ScaleType::Ordinal).stacked());
        assert_eq!(
            validate(&bad),
            vec![Diagnostic::StackOnPositionalOnly(Channel::Color)]
        );
        assert_eq!(validate(&bad)[0].name(), "StackOnPositionalOnly");
        let cols = ["a".to_string()];
        assert_eq!(
            validate_with_columns(&ok, &cols),
            vec![Diagnostic::FieldInTable("b".into())]
        );
    }

    #[test]
    fn continuity_is_a_function_of_scale_and_bin() {
        for scale in ScaleType::ALL {
            for binned in [false, true] {
                let mut e = Encoding::new(Channel::X, "a", scale);
                e.binned = binned;
                assert_ne!(e.is_continuous(), e.is_discrete());
                assert_eq!(e.is_continuous(), scale.is_quantitative() && !binned);
            }
        }
    }
}
