//! Small sample tables shipped with the crate.

use crate::data::{load_csv, DataTable};

const TABLES: [(&str, &str); 3] = [
    ("cars", include_str!("../data/tables/cars.csv")),
    ("sales", include_str!("../data/tables/sales.csv")),
    ("weather", include_str!("../data/tables/weather.csv")),
];

pub fn bundled_tables() -> Vec<DataTable> {
    TABLES
        .iter()
        .map(|(name, text)| load_csv(*name, text).expect("bundled tables are well-formed"))
        .collect()
}

pub fn bundled_table(name: &str) -> Option<DataTable> {
    bundled_tables().into_iter().find(|t| t.name == name)
}
