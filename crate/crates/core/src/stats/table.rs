use std::io::{Read, Write};

use super::{Result, StatsError};

/// Per-slide scores in percent, one named column per rater or model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub slide_ids: Vec<String>,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl ScoreTable {
    pub fn new(slide_ids: Vec<String>) -> Self {
        Self {
            slide_ids,
            columns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.slide_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slide_ids.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| StatsError::MissingColumn(name.to_string()))
    }

    /// Add or replace a column.
    pub fn set_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.slide_ids.len() {
            return Err(StatsError::LengthMismatch(values.len(), self.slide_ids.len()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(StatsError::Table(format!("score {v} in `{name}` outside [0, 100]")));
        }
        match self.columns.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => *v = values,
            None => self.columns.push((name.to_string(), values)),
        }
        Ok(())
    }

    /// Rows whose slide id is in `ids`, in table order.
    pub fn select(&self, ids: &[String]) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| ids.contains(&self.slide_ids[i])).collect();
        Self {
            slide_ids: keep.iter().map(|&i| self.slide_ids[i].clone()).collect(),
            columns: self
                .columns
                .iter()
                .map(|(n, v)| (n.clone(), keep.iter().map(|&i| v[i]).collect()))
                .collect(),
        }
    }

    /// CSV with a `slide_id` column followed by one column per score.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["slide_id"];
        header.extend(self.names());
        w.write_record(&header)?;
        for (i, id) in self.slide_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(self.columns.iter().map(|(_, v)| v[i].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.get(0) != Some("slide_id") {
            return Err(StatsError::Table("first column must be `slide_id`".into()));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut ids = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        for rec in rd.records() {
            let rec = rec?;
            ids.push(rec[0].to_string());
            for (j, col) in cols.iter_mut().enumerate() {
                let v: f64 = rec[j + 1]
                    .trim()
                    .parse()
                    .map_err(|_| StatsError::Table(format!("row {}: `{}` is not a number", ids.len(), &rec[j + 1])))?;
                col.push(v);
            }
        }
        let mut t = Self::new(ids);
        for (n, c) in names.iter().zip(cols) {
            t.set_column(n, c)?;
        }
        Ok(t)
    }
}
