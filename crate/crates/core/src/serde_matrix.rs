//! Serde adapters writing matrices as lists of rows.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::matops::{from_rows, to_rows, Matrix};

pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
    to_rows(m).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
    let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
    from_rows(&rows).map_err(serde::de::Error::custom)
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Option<Matrix>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Matrix>, D::Error> {
        let rows: Option<Vec<Vec<f64>>> = Option::deserialize(d)?;
        rows.map(|r| from_rows(&r).map_err(serde::de::Error::custom)).transpose()
    }
}
