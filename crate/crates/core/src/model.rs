//! Domain types and event-file ingestion.
//!
//! Records are read from line-delimited JSON, one record per line, and are
//! validated against a closed channel dictionary. Days are integers relative
//! to the first date of the record.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Demographic channel id that receives the linearly increasing age curve.
pub const AGE_CHANNEL: &str = "age";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Measurement,
    Code,
    Medication,
    Demographic,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Measurement => "measurement",
            Mode::Code => "code",
            Mode::Medication => "medication",
            Mode::Demographic => "demographic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub id: String,
    pub mode: Mode,
    #[serde(default)]
    pub unit: String,
}

impl ChannelSpec {
    pub fn new(id: impl Into<String>, mode: Mode, unit: impl Into<String>) -> Self {
        ChannelSpec {
            id: id.into(),
            mode,
            unit: unit.into(),
        }
    }
}

/// Global, closed set of channels. Channel order here is the row order of
/// every sample matrix built from it.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDictionary {
    channels: Vec<ChannelSpec>,
    index: HashMap<String, usize>,
}

impl ChannelDictionary {
    pub fn new(channels: Vec<ChannelSpec>) -> Result<Self> {
        let mut index = HashMap::with_capacity(channels.len());
        for (i, c) in channels.iter().enumerate() {
            if c.id.is_empty() {
                return Err(Error::Dictionary(format!("channel {i} has an empty id")));
            }
            if index.insert(c.id.clone(), i).is_some() {
                return Err(Error::Dictionary(format!("duplicate channel id {:?}", c.id)));
            }
        }
        Ok(ChannelDictionary { channels, index })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let channels: Vec<ChannelSpec> = serde_json::from_str(&text)?;
        Self::new(channels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.channels)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&ChannelSpec> {
        self.position(id).map(|i| &self.channels[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementObs {
    pub channel: String,
    pub day: u32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeEvent {
    pub channel: String,
    pub day: u32,
}

/// A medication list review: every listed channel is being taken on `day`,
/// every unlisted medication is not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MedReconciliation {
    pub day: u32,
    pub channels: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub record_id: String,
    pub measurements: Vec<MeasurementObs>,
    pub codes: Vec<CodeEvent>,
    pub med_recons: Vec<MedReconciliation>,
    pub demographics: BTreeMap<String, f64>,
    pub age_at_day0: f64,
    end_day: u32,
}

impl EventRecord {
    /// Builds a record and derives its length from the last observation day.
    /// Performs no dictionary validation; see [`EventRecord::validate`].
    pub fn new(
        record_id: impl Into<String>,
        measurements: Vec<MeasurementObs>,
        codes: Vec<CodeEvent>,
        med_recons: Vec<MedReconciliation>,
        demographics: BTreeMap<String, f64>,
        age_at_day0: f64,
    ) -> Self {
        let mut rec = EventRecord {
            record_id: record_id.into(),
            measurements,
            codes,
            med_recons,
            demographics,
            age_at_day0,
            end_day: 0,
        };
        rec.end_day = rec.observation_days().last().copied().unwrap_or(0);
        rec
    }

    /// Record length `l` in days: the last observation day, or the truncation
    /// day for records cut at an index date.
    pub fn length_days(&self) -> u32 {
        self.end_day
    }

    /// Sorted distinct days carrying a code, measurement or medication
    /// observation.
    pub fn observation_days(&self) -> Vec<u32> {
        let days: BTreeSet<u32> = self
            .measurements
            .iter()
            .map(|m| m.day)
            .chain(self.codes.iter().map(|c| c.day))
            .chain(self.med_recons.iter().map(|r| r.day))
            .collect();
        days.into_iter().collect()
    }

    /// Drops every observation after `day` and fixes the record length to
    /// `day`, so curves built from the result never see later data.
    pub fn truncated_at(&self, day: u32) -> EventRecord {
        EventRecord {
            record_id: self.record_id.clone(),
            measurements: self
                .measurements
                .iter()
                .filter(|m| m.day <= day)
                .cloned()
                .collect(),
            codes: self.codes.iter().filter(|c| c.day <= day).cloned().collect(),
            med_recons: self
                .med_recons
                .iter()
                .filter(|r| r.day <= day)
                .cloned()
                .collect(),
            demographics: self.demographics.clone(),
            age_at_day0: self.age_at_day0,
            end_day: day,
        }
    }

    pub fn validate(&self, dict: &ChannelDictionary) -> Result<()> {
        let fail = |message: String| Error::Validation {
            record_id: self.record_id.clone(),
            message,
        };
        let check = |id: &str, mode: Mode| -> Result<()> {
            match dict.get(id) {
                None => Err(fail(format!("unknown channel {id:?}"))),
                Some(c) if c.mode != mode => Err(fail(format!(
                    "channel {id:?} is a {} channel, used as {}",
                    c.mode.as_str(),
                    mode.as_str()
                ))),
                Some(_) => Ok(()),
            }
        };
        if self.record_id.is_empty() {
            return Err(fail("empty record_id".into()));
        }
        for m in &self.measurements {
            check(&m.channel, Mode::Measurement)?;
            if !m.value.is_finite() {
                return Err(fail(format!("non-finite value for {:?}", m.channel)));
            }
        }
        for c in &self.codes {
            check(&c.channel, Mode::Code)?;
        }
        for r in &self.med_recons {
            for ch in &r.channels {
                check(ch, Mode::Medication)?;
            }
        }
        for (ch, v) in &self.demographics {
            check(ch, Mode::Demographic)?;
            if ch != AGE_CHANNEL && !(0.0..=1.0).contains(v) {
                return Err(fail(format!("demographic {ch:?} = {v} outside [0, 1]")));
            }
        }
        if !self.age_at_day0.is_finite() {
            return Err(fail("non-finite age_at_day0".into()));
        }
        if self.observation_days().len() < 2 {
            return Err(fail(
                "fewer than two distinct dates containing an observation".into(),
            ));
        }
        Ok(())
    }
}

/// On-disk line format.
#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    record_id: String,
    #[serde(default)]
    measurements: Vec<(String, i64, f64)>,
    #[serde(default)]
    codes: Vec<(String, i64)>,
    #[serde(default)]
    med_recons: Vec<(i64, Vec<String>)>,
    #[serde(default)]
    demographics: BTreeMap<String, f64>,
    #[serde(default)]
    age_at_day0: f64,
}

fn to_day(record_id: &str, day: i64) -> Result<u32> {
    u32::try_from(day).map_err(|_| Error::Validation {
        record_id: record_id.to_string(),
        message: format!("day {day} is out of range (days must be >= 0)"),
    })
}

impl RecordLine {
    fn into_record(self) -> Result<EventRecord> {
        let id = self.record_id;
        let measurements = self
            .measurements
            .into_iter()
            .map(|(channel, day, value)| {
                Ok(MeasurementObs {
                    channel,
                    day: to_day(&id, day)?,
                    value,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let codes = self
            .codes
            .into_iter()
            .map(|(channel, day)| {
                Ok(CodeEvent {
                    channel,
                    day: to_day(&id, day)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let med_recons = self
            .med_recons
            .into_iter()
            .map(|(day, channels)| {
                Ok(MedReconciliation {
                    day: to_day(&id, day)?,
                    channels: channels.into_iter().collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EventRecord::new(
            id,
            measurements,
            codes,
            med_recons,
            self.demographics,
            self.age_at_day0,
        ))
    }

    fn from_record(rec: &EventRecord) -> Self {
        RecordLine {
            record_id: rec.record_id.clone(),
            measurements: rec
                .measurements
                .iter()
                .map(|m| (m.channel.clone(), i64::from(m.day), m.value))
                .collect(),
            codes: rec
                .codes
                .iter()
                .map(|c| (c.channel.clone(), i64::from(c.day)))
                .collect(),
            med_recons: rec
                .med_recons
                .iter()
                .map(|r| (i64::from(r.day), r.channels.iter().cloned().collect()))
                .collect(),
            demographics: rec.demographics.clone(),
            age_at_day0: rec.age_at_day0,
        }
    }
}

/// Parses one record line without dictionary validation.
pub fn parse_record_line(line: &str, line_no: usize) -> Result<EventRecord> {
    let raw: RecordLine = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    raw.into_record()
}

/// Reads and validates every record in an event file, preserving file order.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_records(path: &Path, dict: &ChannelDictionary) -> Result<Vec<EventRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record_line(&line, i + 1)?;
        rec.validate(dict)?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[EventRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, &RecordLine::from_record(rec))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dict() -> ChannelDictionary {
        ChannelDictionary::new(vec![
            ChannelSpec::new("c1", Mode::Code, "events/day"),
            ChannelSpec::new("m1", Mode::Measurement, "mg/dL"),
            ChannelSpec::new("rx1", Mode::Medication, ""),
            ChannelSpec::new("female", Mode::Demographic, ""),
            ChannelSpec::new(AGE_CHANNEL, Mode::Demographic, "years"),
        ])
        .unwrap()
    }

    fn parse_str(text: &str) -> Result<Vec<EventRecord>> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        fs::write(&path, text).unwrap();
        parse_records(&path, &dict())
    }

    #[test]
    fn two_code_events_give_length_ten() {
        let recs = parse_str(r#"{"record_id":"a","codes":[["c1",0],["c1",10]]}"#).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].length_days(), 10);
        assert_eq!(recs[0].codes.len(), 2);
    }

    #[test]
    fn single_observation_day_is_rejected() {
        let err = parse_str(r#"{"record_id":"a","codes":[["c1",4],["c1",4]]}"#).unwrap_err();
        assert!(err.to_string().contains("fewer than two distinct dates"), "{err}");
    }

    #[test]
    fn negative_day_names_record() {
        let err = parse_str(r#"{"record_id":"neg","codes":[["c1",-1],["c1",3]]}"#).unwrap_err();
        match err {
            Error::Validation { record_id, .. } => assert_eq!(record_id, "neg"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_channel_and_wrong_mode() {
        let err = parse_str(r#"{"record_id":"u","codes":[["zz",0],["c1",3]]}"#).unwrap_err();
        assert!(err.to_string().contains("unknown channel"));
        let err = parse_str(r#"{"record_id":"u","codes":[["m1",0],["c1",3]]}"#).unwrap_err();
        assert!(err.to_string().contains("measurement channel"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"record_id\":\"a\",\"codes\":[[\"c1\",0],[\"c1\",1]]}\n\n{oops\n";
        match parse_str(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn full_line_round_trips_and_order_is_preserved() {
        let text = concat!(
            r#"{"record_id":"b","measurements":[["m1",2,5.5]],"codes":[["c1",0]],"med_recons":[[7,["rx1"]]],"demographics":{"female":1,"age":0},"age_at_day0":44.5}"#,
            "\n",
            r#"{"record_id":"a","codes":[["c1",0],["c1",9]]}"#,
            "\n"
        );
        let recs = parse_str(text).unwrap();
        assert_eq!(recs[0].record_id, "b");
        assert_eq!(recs[1].record_id, "a");
        assert_eq!(recs[0].length_days(), 7);
        assert_eq!(recs[0].demographics["female"], 1.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.jsonl");
        write_records(&path, &recs).unwrap();
        assert_eq!(parse_records(&path, &dict()).unwrap(), recs);
    }

    #[test]
    fn truncation_drops_later_data() {
        let recs = parse_str(r#"{"record_id":"a","codes":[["c1",0],["c1",5],["c1",9]]}"#).unwrap();
        let t = recs[0].truncated_at(6);
        assert_eq!(t.length_days(), 6);
        assert_eq!(t.codes.len(), 2);
    }

    #[test]
    fn duplicate_dictionary_ids_rejected() {
        let err = ChannelDictionary::new(vec![
            ChannelSpec::new("x", Mode::Code, ""),
            ChannelSpec::new("x", Mode::Measurement, ""),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Dictionary(_)));
    }
}
