//! CSV reading and writing for raw tables.
//!
//! Files are UTF-8 with a header row and `.` decimal separators. Reading
//! is deliberately lax about field counts so that `validate_sample` can
//! report ragged rows together with any other violations.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::RawTable;
use crate::error::Result;

pub fn read_table_from(reader: impl Read) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        rows.push(record.iter().map(|c| c.to_string()).collect());
    }
    Ok(RawTable { headers, rows })
}

pub fn read_table(path: impl AsRef<Path>) -> Result<RawTable> {
    read_table_from(File::open(path)?)
}

pub fn write_table_to(writer: impl Write, table: &RawTable) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(&table.headers)?;
    for row in &table.rows {
        wtr.write_record(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_table(path: impl AsRef<Path>, table: &RawTable) -> Result<()> {
    write_table_to(File::create(path)?, table)
}
