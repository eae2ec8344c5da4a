//! Frame metadata and its newline-delimited wire format (`.telem`).
//!
//! Each line is a flat JSON object with exactly these keys:
//! `uav_id, seq, t_ms, lat_deg, lon_deg, alt_m, qw, qx, qy, qz, hfov_deg,
//! width_px, height_px`. Floats are written in shortest round-trip form, so
//! `decode(encode(f)) == f` bit for bit. Unknown keys are ignored on decode.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::GeodeticCoord;
use crate::projection::{CameraIntrinsics, CameraPose, Quaternion};

/// Largest quaternion norm deviation that decode silently repairs.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TelemetryError {
    #[error("malformed telemetry record: {0}")]
    Malformed(String),
}

/// One telemetry sample from one UAV camera.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMeta {
    pub uav_id: String,
    pub seq: u64,
    /// Unix epoch milliseconds.
    pub t_ms: u64,
    pub pose: CameraPose,
    pub intr: CameraIntrinsics,
}

/// Flat wire form of [`FrameMeta`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub uav_id: String,
    pub seq: u64,
    pub t_ms: u64,
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub hfov_deg: f64,
    pub width_px: u32,
    pub height_px: u32,
}

impl From<&FrameMeta> for TelemetryRecord {
    fn from(f: &FrameMeta) -> Self {
        let [qw, qx, qy, qz] = f.pose.orientation.components();
        Self {
            uav_id: f.uav_id.clone(),
            seq: f.seq,
            t_ms: f.t_ms,
            lat_deg: f.pose.position.lat_deg(),
            lon_deg: f.pose.position.lon_deg(),
            alt_m: f.pose.position.alt_m(),
            qw,
            qx,
            qy,
            qz,
            hfov_deg: f.intr.hfov_deg,
            width_px: f.intr.width_px,
            height_px: f.intr.height_px,
        }
    }
}

impl TryFrom<TelemetryRecord> for FrameMeta {
    type Error = TelemetryError;

    fn try_from(r: TelemetryRecord) -> Result<Self, Self::Error> {
        let malformed = |e: &dyn std::fmt::Display| TelemetryError::Malformed(e.to_string());
        if r.uav_id.is_empty() {
            return Err(TelemetryError::Malformed("empty uav_id".into()));
        }
        let position = GeodeticCoord::new(r.lat_deg, r.lon_deg, r.alt_m).map_err(|e| malformed(&e))?;
        let norm = Quaternion::raw_norm(r.qw, r.qx, r.qy, r.qz);
        if !((norm - 1.0).abs() < QUATERNION_NORM_TOLERANCE) {
            return Err(TelemetryError::Malformed(format!(
                "quaternion norm {norm} deviates from 1 by {:e}",
                (norm - 1.0).abs()
            )));
        }
        let orientation = Quaternion::new(r.qw, r.qx, r.qy, r.qz).map_err(|e| malformed(&e))?;
        let intr = CameraIntrinsics::new(r.width_px, r.height_px, r.hfov_deg).map_err(|e| malformed(&e))?;
        Ok(FrameMeta {
            uav_id: r.uav_id,
            seq: r.seq,
            t_ms: r.t_ms,
            pose: CameraPose {
                position,
                orientation,
            },
            intr,
        })
    }
}

/// Encodes one record without the trailing newline.
pub fn encode(f: &FrameMeta) -> String {
    serde_json::to_string(&TelemetryRecord::from(f)).expect("telemetry record serializes")
}

pub fn decode(line: &str) -> Result<FrameMeta, TelemetryError> {
    let rec: TelemetryRecord =
        serde_json::from_str(line.trim_end()).map_err(|e| TelemetryError::Malformed(e.to_string()))?;
    FrameMeta::try_from(rec)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StreamErrorKind {
    #[error(transparent)]
    Malformed(#[from] TelemetryError),
    #[error("out of order record for {uav_id}: seq {seq} after {prev_seq}")]
    OutOfOrder { uav_id: String, prev_seq: u64, seq: u64 },
    #[error("i/o error: {0}")]
    Io(String),
}

/// A per-line failure; the stream carries on after reporting it.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {kind}")]
pub struct StreamError {
    /// 1-based line number in the source.
    pub line: usize,
    pub kind: StreamErrorKind,
}

/// Enforces strictly increasing `seq` and non-decreasing `t_ms` per UAV.
#[derive(Debug, Default, Clone)]
pub struct OrderTracker {
    last: HashMap<String, (u64, u64)>,
}

impl OrderTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accepts `f` if it continues its UAV's sequence, recording it.
    pub fn check(&mut self, f: &FrameMeta) -> Result<(), StreamErrorKind> {
        if let Some(&(prev_seq, prev_t)) = self.last.get(&f.uav_id) {
            if f.seq <= prev_seq || f.t_ms < prev_t {
                return Err(StreamErrorKind::OutOfOrder {
                    uav_id: f.uav_id.clone(),
                    prev_seq,
                    seq: f.seq,
                });
            }
        }
        self.last.insert(f.uav_id.clone(), (f.seq, f.t_ms));
        Ok(())
    }
}

/// Reads newline-delimited telemetry, skipping and reporting bad lines.
///
/// Blank lines are ignored. Records from different UAVs may interleave;
/// each UAV's order is checked independently.
pub struct TelemetryReader<R> {
    source: R,
    line_no: usize,
    buf: Vec<u8>,
    order: OrderTracker,
    done: bool,
}

impl<R: BufRead> TelemetryReader<R> {
    pub fn new(source: R) -> Self {
        Self {
            source,
            line_no: 0,
            buf: Vec::new(),
            order: OrderTracker::new(),
            done: false,
        }
    }
}

impl<R: BufRead> Iterator for TelemetryReader<R> {
    type Item = Result<FrameMeta, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            self.buf.clear();
            match self.source.read_until(b'\n', &mut self.buf) {
                Ok(0) => self.done = true,
                Ok(_) => {
                    self.line_no += 1;
                    let line = self.line_no;
                    let err = |kind| Some(Err(StreamError { line, kind }));
                    let text = match std::str::from_utf8(&self.buf) {
                        Ok(t) => t,
                        Err(e) => {
                            return err(StreamErrorKind::Malformed(TelemetryError::Malformed(format!(
                                "invalid UTF-8: {e}"
                            ))))
                        }
                    };
                    if text.trim().is_empty() {
                        continue;
                    }
                    let frame = match decode(text) {
                        Ok(f) => f,
                        Err(e) => return err(e.into()),
                    };
                    return match self.order.check(&frame) {
                        Ok(()) => Some(Ok(frame)),
                        Err(kind) => err(kind),
                    };
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(StreamError {
                        line: self.line_no + 1,
                        kind: StreamErrorKind::Io(e.to_string()),
                    }));
                }
            }
        }
        None
    }
}

/// Writes one encoded record per line.
pub struct TelemetryWriter<W> {
    sink: W,
}

impl<W: Write> TelemetryWriter<W> {
    pub fn new(sink: W) -> Self {
        Self { sink }
    }

    pub fn write(&mut self, f: &FrameMeta) -> io::Result<()> {
        self.sink.write_all(encode(f).as_bytes())?;
        self.sink.write_all(b"\n")
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.sink.flush()
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::pose_from_gimbal;
    use proptest::prelude::*;

    fn frame(uav: &str, seq: u64) -> FrameMeta {
        FrameMeta {
            uav_id: uav.into(),
            seq,
            t_ms: 1_700_000_000_000 + seq * 200,
            pose: CameraPose {
                position: GeodeticCoord::new(38.6367, -90.2342, 170.25).unwrap(),
                orientation: pose_from_gimbal(12.5, 60.0),
            },
            intr: CameraIntrinsics::new(1920, 1080, 69.0).unwrap(),
        }
    }

    fn write_all(frames: &[FrameMeta]) -> Vec<u8> {
        let mut w = TelemetryWriter::new(Vec::new());
        for f in frames {
            w.write(f).unwrap();
        }
        w.into_inner()
    }

    #[test]
    fn encodes_exact_key_set() {
        let line = encode(&frame("uav-1", 3));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        let mut expected = vec![
            "uav_id", "seq", "t_ms", "lat_deg", "lon_deg", "alt_m", "qw", "qx", "qy", "qz", "hfov_deg",
            "width_px", "height_px",
        ];
        expected.sort();
        let mut keys_sorted = keys.clone();
        keys_sorted.sort();
        assert_eq!(keys_sorted, expected);
        assert!(!line.contains('\n'));
    }

    #[test]
    fn missing_key_is_malformed() {
        let line = encode(&frame("uav-1", 3));
        let mut v: serde_json::Value = serde_json::from_str(&line).unwrap();
        v.as_object_mut().unwrap().remove("qz");
        let err = decode(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("qz"), "{err}");
    }

    #[test]
    fn unknown_keys_are_ignored() {
        let line = encode(&frame("uav-1", 3));
        let mut v: serde_json::Value = serde_json::from_str(&line).unwrap();
        v.as_object_mut().unwrap().insert("battery_pct".into(), 87.into());
        assert_eq!(decode(&v.to_string()).unwrap(), frame("uav-1", 3));
    }

    #[test]
    fn quaternion_norm_policy() {
        let mut rec = TelemetryRecord::from(&frame("a", 1));
        (rec.qw, rec.qx, rec.qy, rec.qz) = (0.5, 0.5, 0.5, 0.5);
        let f = FrameMeta::try_from(rec.clone()).unwrap();
        assert_eq!(f.pose.orientation.norm(), 1.0);

        (rec.qw, rec.qx, rec.qy, rec.qz) = (1.0 + 5e-7, 0.0, 0.0, 0.0);
        let f = FrameMeta::try_from(rec.clone()).unwrap();
        assert_eq!(f.pose.orientation.components(), [1.0, 0.0, 0.0, 0.0]);

        (rec.qw, rec.qx, rec.qy, rec.qz) = (1.0 + 1.5e-6, 0.0, 0.0, 0.0);
        assert!(FrameMeta::try_from(rec.clone()).is_err());
        (rec.qw, rec.qx, rec.qy, rec.qz) = (f64::NAN, 0.0, 0.0, 0.0);
        assert!(FrameMeta::try_from(rec).is_err());
    }

    #[test]
    fn non_numeric_and_invalid_fields_are_malformed() {
        let line = encode(&frame("uav-1", 3));
        for (key, val) in [
            ("lat_deg", serde_json::json!("north")),
            ("lat_deg", serde_json::json!(91.0)),
            ("width_px", serde_json::json!(0)),
            ("hfov_deg", serde_json::json!(200.0)),
            ("seq", serde_json::json!(-1)),
            ("uav_id", serde_json::json!("")),
        ] {
            let mut v: serde_json::Value = serde_json::from_str(&line).unwrap();
            v[key] = val;
            assert!(decode(&v.to_string()).is_err(), "{key}");
        }
        assert!(decode("").is_err());
        assert!(decode("not json").is_err());
    }

    #[test]
    fn interleaved_streams_keep_per_uav_order() {
        let frames: Vec<_> = (1..=3).flat_map(|s| [frame("A", s), frame("B", s)]).collect();
        let out: Vec<_> = TelemetryReader::new(&write_all(&frames)[..])
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(out, frames);
        let seqs = |id: &str| out.iter().filter(|f| f.uav_id == id).map(|f| f.seq).collect::<Vec<_>>();
        assert_eq!(seqs("A"), [1, 2, 3]);
        assert_eq!(seqs("B"), [1, 2, 3]);
    }

    #[test]
    fn malformed_line_is_skipped_and_reported() {
        let frames: Vec<_> = (1..=100).map(|s| frame("A", s)).collect();
        let mut text = String::from_utf8(write_all(&frames)).unwrap();
        let lines: Vec<_> = text.lines().map(str::to_owned).collect();
        text = lines
            .iter()
            .enumerate()
            .map(|(i, l)| if i == 41 { "{\"uav_id\":\"A\",\"seq\":" } else { l.as_str() })
            .collect::<Vec<_>>()
            .join("\n");

        let (ok, bad): (Vec<_>, Vec<_>) = TelemetryReader::new(text.as_bytes()).partition(Result::is_ok);
        assert_eq!(ok.len(), 99);
        assert_eq!(bad.len(), 1);
        let e = bad.into_iter().next().unwrap().unwrap_err();
        assert_eq!(e.line, 42);
        assert!(matches!(e.kind, StreamErrorKind::Malformed(_)));
    }

    #[test]
    fn empty_source_yields_nothing() {
        assert_eq!(TelemetryReader::new(&b""[..]).count(), 0);
        assert_eq!(TelemetryReader::new(&b"\n\n  \n"[..]).count(), 0);
    }

    #[test]
    fn out_of_order_is_reported_not_reordered() {
        let frames = [frame("A", 1), frame("A", 3), frame("A", 2), frame("A", 4)];
        let items: Vec<_> = TelemetryReader::new(&write_all(&frames)[..]).collect();
        assert_eq!(items.len(), 4);
        assert!(items[0].is_ok() && items[1].is_ok() && items[3].is_ok());
        let e = items[2].clone().unwrap_err();
        assert_eq!(e.line, 3);
        assert_eq!(
            e.kind,
            StreamErrorKind::OutOfOrder { uav_id: "A".into(), prev_seq: 3, seq: 2 }
        );
    }

    #[test]
    fn invalid_utf8_is_reported() {
        let mut bytes = write_all(&[frame("A", 1)]);
        bytes.extend_from_slice(&[0xff, 0xfe, b'\n']);
        bytes.extend(write_all(&[frame("A", 2)]));
        let items: Vec<_> = TelemetryReader::new(&bytes[..]).collect();
        assert_eq!(items.len(), 3);
        assert_eq!(items[1].clone().unwrap_err().line, 2);
    }

    pub(crate) fn arb_frame() -> impl Strategy<Value = FrameMeta> {
        (
            "[a-zA-Z0-9_\\-\\. \"\\\\é]{1,16}",
            any::<u64>(),
            any::<u64>(),
            (-90.0f64..=90.0, -180.0f64..180.0, -1e4f64..1e5),
            (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            (1u32..10_000, 1u32..10_000, 0.001f64..179.999),
        )
            .prop_filter_map("degenerate quaternion", |(id, seq, t, (lat, lon, alt), (w, x, y, z), (wd, ht, fov))| {
                let orientation = Quaternion::new(w, x, y, z).ok()?;
                Some(FrameMeta {
                    uav_id: id,
                    seq,
                    t_ms: t,
                    pose: CameraPose {
                        position: GeodeticCoord::new(lat, lon, alt).ok()?,
                        orientation,
                    },
                    intr: CameraIntrinsics::new(wd, ht, fov).ok()?,
                })
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn codec_round_trip_is_bit_exact(f in arb_frame()) {
            let back = decode(&encode(&f)).unwrap();
            prop_assert_eq!(&back, &f);
            let bits = |q: &FrameMeta| q.pose.orientation.components().map(f64::to_bits);
            prop_assert_eq!(bits(&back), bits(&f));
            prop_assert_eq!(back.pose.position.alt_m().to_bits(), f.pose.position.alt_m().to_bits());
        }

        #[test]
        fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = TelemetryReader::new(&bytes[..]).count();
            if let Ok(s) = std::str::from_utf8(&bytes) {
                let _ = decode(s);
            }
        }

        #[test]
        fn decoder_survives_mutated_records(f in arb_frame(), edits in proptest::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8)) {
            let mut bytes = encode(&f).into_bytes();
            for (idx, b) in edits {
                let i = idx.index(bytes.len());
                bytes[i] = b;
            }
            let _ = TelemetryReader::new(&bytes[..]).count();
        }
    }
}
