//! Position markup: (0, 1000) coordinate normalization, `<ref>/<box>`
//! grounding strings, task prompt templates, and the rect/polygon/point
//! location forms.
//!
//! Serialized spans always place the text before its location, emit no
//! whitespace, and use integer coordinates on the (0, 1000) scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the normalized coordinate scale.
pub const SCALE: u32 = 1000;

fn check_dims(w_r: u32, h_r: u32) -> Result<()> {
    if w_r == 0 || h_r == 0 {
        return Err(Error::InvalidParameter(format!(
            "image dimensions must be positive, got {w_r}x{h_r}"
        )));
    }
    Ok(())
}

/// Maps a pixel coordinate to the (0, 1000) scale:
/// `nx = round(x/W_r · 1000)`, `ny = round(y/H_r · 1000)`, rounded half away
/// from zero and clamped to `[0, 1000]`.
pub fn normalize_coord(x: f64, y: f64, w_r: u32, h_r: u32) -> Result<(u32, u32)> {
    check_dims(w_r, h_r)?;
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite("normalize_coord input".into()));
    }
    if x < 0.0 || y < 0.0 || x > w_r as f64 || y > h_r as f64 {
        return Err(Error::InvalidParameter(format!(
            "pixel ({x}, {y}) outside a {w_r}x{h_r} image"
        )));
    }
    let nx = (x / w_r as f64 * SCALE as f64).round().clamp(0.0, SCALE as f64) as u32;
    let ny = (y / h_r as f64 * SCALE as f64).round().clamp(0.0, SCALE as f64) as u32;
    Ok((nx, ny))
}

/// The normalization formula exactly as printed in the source description:
/// both axes divided by the image height. Kept for comparison; the regular
/// [`normalize_coord`] divides x by the width instead.
pub fn normalize_coord_height_only(x: f64, y: f64, w_r: u32, h_r: u32) -> Result<(u32, u32)> {
    check_dims(w_r, h_r)?;
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite("normalize_coord input".into()));
    }
    if x < 0.0 || y < 0.0 || x > w_r as f64 || y > h_r as f64 {
        return Err(Error::InvalidParameter(format!(
            "pixel ({x}, {y}) outside a {w_r}x{h_r} image"
        )));
    }
    let nx = (x / h_r as f64 * SCALE as f64).round().clamp(0.0, SCALE as f64) as u32;
    let ny = (y / h_r as f64 * SCALE as f64).round().clamp(0.0, SCALE as f64) as u32;
    Ok((nx, ny))
}

/// Inverse mapping back to pixels: `x = round(nx/1000 · W_r)`.
pub fn denormalize_coord(nx: u32, ny: u32, w_r: u32, h_r: u32) -> Result<(u32, u32)> {
    check_dims(w_r, h_r)?;
    if nx > SCALE || ny > SCALE {
        return Err(Error::InvalidParameter(format!(
            "normalized coordinate ({nx}, {ny}) outside [0, {SCALE}]"
        )));
    }
    let x = (nx as f64 / SCALE as f64 * w_r as f64).round() as u32;
    let y = (ny as f64 / SCALE as f64 * h_r as f64).round() as u32;
    Ok((x, y))
}

/// Axis-aligned box on the (0, 1000) scale with canonical corner order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizedBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl NormalizedBox {
    /// Builds a box, swapping corners as needed so `x1 <= x2, y1 <= y2`.
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        for v in [x1, y1, x2, y2] {
            if v > SCALE {
                return Err(Error::InvalidParameter(format!(
                    "box coordinate {v} outside [0, {SCALE}]"
                )));
            }
        }
        Ok(Self {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        })
    }
}

/// Center of a box, each axis rounded half away from zero.
pub fn box_to_point(b: &NormalizedBox) -> (u32, u32) {
    let cx = ((b.x1 + b.x2) as f64 / 2.0).round() as u32;
    let cy = ((b.y1 + b.y2) as f64 / 2.0).round() as u32;
    (cx, cy)
}

/// Location attached to a grounded text span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Rect(NormalizedBox),
    /// At least three vertices.
    Polygon(Vec<(u32, u32)>),
    Point(u32, u32),
}

impl Location {
    pub fn polygon(points: Vec<(u32, u32)>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidParameter(format!(
                "polygon needs at least 3 vertices, got {}",
                points.len()
            )));
        }
        for &(x, y) in &points {
            if x > SCALE || y > SCALE {
                return Err(Error::InvalidParameter(format!(
                    "polygon vertex ({x}, {y}) outside [0, {SCALE}]"
                )));
            }
        }
        Ok(Location::Polygon(points))
    }
}

/// A text span, optionally grounded at a location. The text always precedes
/// the location in serialized form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundedSpan {
    pub text: String,
    pub location: Option<Location>,
}

const RESERVED_TAGS: [&str; 4] = ["<ref>", "</ref>", "<box>", "</box>"];

/// Renders a span in the markup grammar:
/// `<ref>TEXT</ref><box>(x1,y1),(x2,y2)</box>` for rects, all vertices for
/// polygons, one tuple for points, no whitespace anywhere. Text containing
/// a reserved tag is rejected since the grammar has no escape form.
pub fn serialize_grounded(span: &GroundedSpan) -> Result<String> {
    for tag in RESERVED_TAGS {
        if span.text.contains(tag) {
            return Err(Error::Markup {
                offset: span.text.find(tag).unwrap_or(0),
                message: format!("span text contains reserved tag `{tag}`"),
            });
        }
    }
    let mut out = format!("<ref>{}</ref>", span.text);
    match &span.location {
        None => {}
        Some(Location::Rect(b)) => {
            out.push_str(&format!(
                "<box>({},{}),({},{})</box>",
                b.x1, b.y1, b.x2, b.y2
            ));
        }
        Some(Location::Polygon(points)) => {
            if points.len() < 3 {
                return Err(Error::InvalidParameter(
                    "polygon needs at least 3 vertices".into(),
                ));
            }
            let body: Vec<String> = points.iter().map(|(x, y)| format!("({x},{y})")).collect();
            out.push_str(&format!("<box>{}</box>", body.join(",")));
        }
        Some(Location::Point(x, y)) => {
            out.push_str(&format!("<box>({x},{y})</box>"));
        }
    }
    Ok(out)
}

/// Byte-cursor helpers for the markup parser.
struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_spaces(&mut self) {
        while self.s.as_bytes().get(self.pos) == Some(&b' ') {
            self.pos += 1;
        }
    }

    fn expect(&mut self, b: u8, what: &str) -> Result<()> {
        if self.s.as_bytes().get(self.pos) == Some(&b) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Markup {
                offset: self.pos,
                message: format!("expected {what}"),
            })
        }
    }

    fn parse_number(&mut self) -> Result<u32> {
        let start = self.pos;
        let bytes = self.s.as_bytes();
        while self.pos < self.s.len() && bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Markup {
                offset: start,
                message: "expected a coordinate".into(),
            });
        }
        let n: u64 = self.s[start..self.pos].parse().map_err(|_| Error::Markup {
            offset: start,
            message: "coordinate too large".into(),
        })?;
        if n > SCALE as u64 {
            return Err(Error::Markup {
                offset: start,
                message: format!("coordinate {n} outside [0, {SCALE}]"),
            });
        }
        Ok(n as u32)
    }
}

/// Parses the tuples inside one `<box>…</box>` body. `base` is the byte
/// offset of the body within the full document, so errors point at the
/// original string. Accepts optional spaces around tuples and numbers.
fn parse_tuples(doc: &str, start: usize, end: usize) -> Result<Vec<(u32, u32)>> {
    let mut c = Cursor { s: doc, pos: start };
    let mut points = Vec::new();
    loop {
        c.skip_spaces();
        c.expect(b'(', "`(` opening a coordinate tuple")?;
        c.skip_spaces();
        let x = c.parse_number()?;
        c.skip_spaces();
        c.expect(b',', "`,` between coordinates")?;
        c.skip_spaces();
        let y = c.parse_number()?;
        c.skip_spaces();
        c.expect(b')', "`)` closing a coordinate tuple")?;
        points.push((x, y));
        c.skip_spaces();
        if c.pos >= end {
            break;
        }
        c.expect(b',', "`,` between tuples")?;
    }
    if c.pos != end {
        return Err(Error::Markup {
            offset: c.pos,
            message: "trailing content in box body".into(),
        });
    }
    Ok(points)
}

/// Extracts every `<ref>…</ref>` span, with its immediately following
/// `<box>…</box>` when present, scanning left to right. A ref with no box
/// becomes a text-only span. Content between spans is ignored; a `<box>`
/// with no preceding ref, an unclosed tag, or a malformed tuple is an error
/// carrying the byte offset.
pub fn parse_grounded(s: &str) -> Result<Vec<GroundedSpan>> {
    let mut spans = Vec::new();
    let mut pos = 0usize;
    loop {
        let rel = s[pos..].find("<ref>");
        // Any <box> before the next ref (or in the tail) is unpaired.
        let gap_end = rel.map_or(s.len(), |r| pos + r);
        if let Some(stray) = s[pos..gap_end].find("<box>") {
            return Err(Error::Markup {
                offset: pos + stray,
                message: "<box> without a preceding <ref>".into(),
            });
        }
        let Some(rel) = rel else { break };
        let ref_start = pos + rel;
        let text_start = ref_start + "<ref>".len();
        let close = s[text_start..].find("</ref>").ok_or(Error::Markup {
            offset: ref_start,
            message: "unclosed <ref>".into(),
        })?;
        let text = &s[text_start..text_start + close];
        if text.contains("<ref>") {
            return Err(Error::Markup {
                offset: text_start + text.find("<ref>").unwrap(),
                message: "nested <ref>".into(),
            });
        }
        let mut cursor = text_start + close + "</ref>".len();
        // Optional spaces before an attached box are tolerated on input.
        let mut after = cursor;
        while s.as_bytes().get(after) == Some(&b' ') {
            after += 1;
        }
        let location = if s[after..].starts_with("<box>") {
            let body_start = after + "<box>".len();
            let body_close = s[body_start..].find("</box>").ok_or(Error::Markup {
                offset: after,
                message: "unclosed <box>".into(),
            })?;
            let points = parse_tuples(s, body_start, body_start + body_close)?;
            cursor = body_start + body_close + "</box>".len();
            Some(match points.len() {
                0 => unreachable!("parse_tuples yields at least one tuple"),
                1 => Location::Point(points[0].0, points[0].1),
                2 => Location::Rect(NormalizedBox::new(
                    points[0].0,
                    points[0].1,
                    points[1].0,
                    points[1].1,
                )?),
                _ => Location::polygon(points)?,
            })
        } else {
            None
        };
        spans.push(GroundedSpan {
            text: text.to_string(),
            location,
        });
        pos = cursor;
    }
    Ok(spans)
}

/// The prompt families of the task table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptTask {
    ReadAllText,
    TextSpotting,
    OriginalTask,
    PositionOfText,
    TextRecognition,
    VqaGrounding,
}

impl PromptTask {
    /// Parses the CLI spelling of a task name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            // `read-all` is the short form used on the command line.
            "read-all-text" | "read-all" => Ok(Self::ReadAllText),
            "text-spotting" => Ok(Self::TextSpotting),
            "original-task" => Ok(Self::OriginalTask),
            "position-of-text" => Ok(Self::PositionOfText),
            "text-recognition" => Ok(Self::TextRecognition),
            "vqa-grounding" => Ok(Self::VqaGrounding),
            other => Err(Error::InvalidParameter(format!(
                "unknown prompt task `{other}`"
            ))),
        }
    }

    pub const ALL_NAMES: [&'static str; 6] = [
        "read-all-text",
        "text-spotting",
        "original-task",
        "position-of-text",
        "text-recognition",
        "vqa-grounding",
    ];
}

/// Emits the exact prompt template for a task, substituting `{Question}`
/// where the template has one. Tasks without a question slot emit their
/// template verbatim.
pub fn build_prompt(task: PromptTask, question: Option<&str>) -> Result<String> {
    let need_question = || {
        question.map(str::to_string).ok_or_else(|| {
            Error::InvalidParameter(format!("task {task:?} requires a question"))
        })
    };
    Ok(match task {
        PromptTask::ReadAllText => "Read all the text in the image.".to_string(),
        PromptTask::TextSpotting => "OCR with grounding:".to_string(),
        PromptTask::OriginalTask => format!("{}. Answer:", need_question()?),
        PromptTask::PositionOfText => "<ref>text</ref>".to_string(),
        PromptTask::TextRecognition => {
            "<ref>This</ref><box>(x1,y1),(x2,y2)</box> is".to_string()
        }
        PromptTask::VqaGrounding => format!(
            "{}. Provide the location coordinates of the answer when answering the question.",
            need_question()?
        ),
    })
}

/// Flat record form of a [`GroundedSpan`] for JSONL interchange:
/// `kind` is one of `text`, `point`, `rect`, `polygon`; `coords` holds the
/// location's tuples in order (empty for `text`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SpanRecord {
    pub text: String,
    pub kind: String,
    pub coords: Vec<[u32; 2]>,
}

impl From<&GroundedSpan> for SpanRecord {
    fn from(span: &GroundedSpan) -> Self {
        let (kind, coords) = match &span.location {
            None => ("text", vec![]),
            Some(Location::Point(x, y)) => ("point", vec![[*x, *y]]),
            Some(Location::Rect(b)) => ("rect", vec![[b.x1, b.y1], [b.x2, b.y2]]),
            Some(Location::Polygon(p)) => {
                ("polygon", p.iter().map(|&(x, y)| [x, y]).collect())
            }
        };
        SpanRecord {
            text: span.text.clone(),
            kind: kind.to_string(),
            coords,
        }
    }
}

impl TryFrom<&SpanRecord> for GroundedSpan {
    type Error = Error;

    fn try_from(rec: &SpanRecord) -> Result<GroundedSpan> {
        let location = match (rec.kind.as_str(), rec.coords.len()) {
            ("text", 0) => None,
            ("point", 1) => Some(Location::Point(rec.coords[0][0], rec.coords[0][1])),
            ("rect", 2) => Some(Location::Rect(NormalizedBox::new(
                rec.coords[0][0],
                rec.coords[0][1],
                rec.coords[1][0],
                rec.coords[1][1],
            )?)),
            ("polygon", n) if n >= 3 => Some(Location::polygon(
                rec.coords.iter().map(|c| (c[0], c[1])).collect(),
            )?),
            (kind, n) => {
                return Err(Error::Record(format!(
                    "span kind `{kind}` with {n} coords is not a valid combination"
                )))
            }
        };
        Ok(GroundedSpan {
            text: rec.text.clone(),
            location,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_origin() {
        assert_eq!(normalize_coord(0.0, 0.0, 640, 480).unwrap(), (0, 0));
    }

    #[test]
    fn normalize_midpoint() {
        assert_eq!(normalize_coord(224.0, 224.0, 448, 448).unwrap(), (500, 500));
    }

    #[test]
    fn normalize_hand_case() {
        // 100/640*1000 = 156.25 -> 156; 30/480*1000 = 62.5 -> 63.
        assert_eq!(normalize_coord(100.0, 30.0, 640, 480).unwrap(), (156, 63));
    }

    #[test]
    fn normalize_rejects_out_of_range() {
        assert!(normalize_coord(-1.0, 0.0, 640, 480).is_err());
        assert!(normalize_coord(641.0, 0.0, 640, 480).is_err());
        assert!(normalize_coord(f64::NAN, 0.0, 640, 480).is_err());
        assert!(normalize_coord(0.0, 0.0, 0, 480).is_err());
    }

    #[test]
    fn height_only_variant_divides_x_by_height() {
        // x = 320 in a 640x480 image: regular form gives 500, the literal
        // printed formula gives 320/480*1000 = 666.67 -> 667.
        assert_eq!(normalize_coord(320.0, 0.0, 640, 480).unwrap().0, 500);
        assert_eq!(
            normalize_coord_height_only(320.0, 0.0, 640, 480).unwrap().0,
            667
        );
        // On square images the two agree.
        for x in [0.0, 100.0, 448.0] {
            assert_eq!(
                normalize_coord(x, 7.0, 448, 448).unwrap(),
                normalize_coord_height_only(x, 7.0, 448, 448).unwrap()
            );
        }
    }

    #[test]
    fn denormalize_full_extent() {
        assert_eq!(denormalize_coord(1000, 1000, 448, 448).unwrap(), (448, 448));
    }

    #[test]
    fn denormalize_inverse_hand_case() {
        assert_eq!(denormalize_coord(156, 63, 640, 480).unwrap(), (100, 30));
    }

    #[test]
    fn denormalize_rejects_out_of_scale() {
        assert!(denormalize_coord(1001, 0, 640, 480).is_err());
    }

    #[test]
    fn round_trip_quantization_bound() {
        for (w, h) in [(448u32, 448u32), (896, 896), (1344, 896), (640, 480)] {
            let bx = (w as f64 / 1000.0).ceil() as i64;
            let by = (h as f64 / 1000.0).ceil() as i64;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for _ in 0..500 {
                let x = rng.gen_range(0..=w) as f64;
                let y = rng.gen_range(0..=h) as f64;
                let (nx, ny) = normalize_coord(x, y, w, h).unwrap();
                let (rx, ry) = denormalize_coord(nx, ny, w, h).unwrap();
                assert!((rx as i64 - x as i64).abs() <= bx, "{x} -> {nx} -> {rx} in {w}");
                assert!((ry as i64 - y as i64).abs() <= by, "{y} -> {ny} -> {ry} in {h}");
            }
        }
    }

    #[test]
    fn box_canonicalizes_corners() {
        let b = NormalizedBox::new(30, 40, 10, 20).unwrap();
        assert_eq!(b, NormalizedBox::new(10, 20, 30, 40).unwrap());
        assert!(b.x1 <= b.x2 && b.y1 <= b.y2);
    }

    #[test]
    fn box_rejects_out_of_scale() {
        assert!(NormalizedBox::new(0, 0, 1001, 5).is_err());
    }

    #[test]
    fn box_center_cases() {
        let full = NormalizedBox::new(0, 0, 1000, 1000).unwrap();
        assert_eq!(box_to_point(&full), (500, 500));
        let degenerate = NormalizedBox::new(7, 7, 7, 7).unwrap();
        assert_eq!(box_to_point(&degenerate), (7, 7));
        let b = NormalizedBox::new(10, 20, 31, 40).unwrap();
        assert_eq!(box_to_point(&b), (21, 30));
    }

    #[test]
    fn box_center_corner_swap_invariant() {
        let a = NormalizedBox::new(10, 20, 31, 40).unwrap();
        let b = NormalizedBox::new(31, 40, 10, 20).unwrap();
        assert_eq!(box_to_point(&a), box_to_point(&b));
    }

    #[test]
    fn serialize_rect_exact() {
        let span = GroundedSpan {
            text: "This".into(),
            location: Some(Location::Rect(NormalizedBox::new(10, 20, 30, 40).unwrap())),
        };
        assert_eq!(
            serialize_grounded(&span).unwrap(),
            "<ref>This</ref><box>(10,20),(30,40)</box>"
        );
    }

    #[test]
    fn serialize_point_exact() {
        let span = GroundedSpan {
            text: "x".into(),
            location: Some(Location::Point(500, 500)),
        };
        assert_eq!(
            serialize_grounded(&span).unwrap(),
            "<ref>x</ref><box>(500,500)</box>"
        );
    }

    #[test]
    fn serialize_polygon_exact() {
        let span = GroundedSpan {
            text: "tri".into(),
            location: Some(Location::polygon(vec![(0, 0), (10, 0), (5, 8)]).unwrap()),
        };
        assert_eq!(
            serialize_grounded(&span).unwrap(),
            "<ref>tri</ref><box>(0,0),(10,0),(5,8)</box>"
        );
    }

    #[test]
    fn serialize_rejects_reserved_tags() {
        for tag in RESERVED_TAGS {
            let span = GroundedSpan {
                text: format!("a{tag}b"),
                location: None,
            };
            assert!(serialize_grounded(&span).is_err(), "tag {tag}");
        }
    }

    #[test]
    fn serialized_output_has_no_whitespace_outside_text() {
        let span = GroundedSpan {
            text: "two words".into(),
            location: Some(Location::Rect(NormalizedBox::new(1, 2, 3, 4).unwrap())),
        };
        let s = serialize_grounded(&span).unwrap();
        let outside_text = s.replace("two words", "");
        assert!(!outside_text.contains(' '));
        // Ordering rule: the ref always precedes its box.
        assert!(s.find("<ref>").unwrap() < s.find("<box>").unwrap());
    }

    #[test]
    fn parse_single_pair() {
        let spans = parse_grounded("<ref>a</ref><box>(1,2),(3,4)</box>").unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].text, "a");
        assert_eq!(
            spans[0].location,
            Some(Location::Rect(NormalizedBox::new(1, 2, 3, 4).unwrap()))
        );
    }

    #[test]
    fn parse_empty_string() {
        assert_eq!(parse_grounded("").unwrap(), vec![]);
    }

    #[test]
    fn parse_two_pairs_in_order() {
        let spans =
            parse_grounded("<ref>a</ref><box>(1,1)</box>junk<ref>b</ref><box>(2,2)</box>")
                .unwrap();
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].text, "a");
        assert_eq!(spans[1].text, "b");
        assert_eq!(spans[1].location, Some(Location::Point(2, 2)));
    }

    #[test]
    fn parse_text_only_ref() {
        let spans = parse_grounded("<ref>alone</ref> and trailing words").unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].location, None);
    }

    #[test]
    fn parse_accepts_optional_spaces() {
        let spans = parse_grounded("<ref>a</ref> <box>( 1 , 2 ) , ( 3 , 4 )</box>").unwrap();
        assert_eq!(
            spans[0].location,
            Some(Location::Rect(NormalizedBox::new(1, 2, 3, 4).unwrap()))
        );
    }

    #[test]
    fn parse_reports_offset_of_bad_coordinate() {
        let doc = "<ref>a</ref><box>(1,2000)</box>";
        let err = parse_grounded(doc).unwrap_err();
        match err {
            Error::Markup { offset, ref message } => {
                assert_eq!(&doc[offset..offset + 4], "2000");
                assert!(message.contains("2000"), "{message}");
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_stray_box() {
        let err = parse_grounded("<box>(1,2)</box>").unwrap_err();
        assert!(matches!(err, Error::Markup { offset: 0, .. }));
    }

    #[test]
    fn parse_rejects_unclosed_ref() {
        let err = parse_grounded("<ref>abc").unwrap_err();
        assert!(err.to_string().contains("unclosed"));
    }

    #[test]
    fn parse_rejects_malformed_tuple() {
        assert!(parse_grounded("<ref>a</ref><box>(1;2)</box>").is_err());
        assert!(parse_grounded("<ref>a</ref><box>()</box>").is_err());
        assert!(parse_grounded("<ref>a</ref><box>(1,2</box>").is_err());
    }

    fn random_span(rng: &mut ChaCha8Rng) -> GroundedSpan {
        let words = ["invoice", "total", "42", "date", "αβγ", "x y z"];
        let text = words[rng.gen_range(0..words.len())].to_string();
        let location = match rng.gen_range(0..4) {
            0 => None,
            1 => Some(Location::Point(rng.gen_range(0..=1000), rng.gen_range(0..=1000))),
            2 => Some(Location::Rect(
                NormalizedBox::new(
                    rng.gen_range(0..=1000),
                    rng.gen_range(0..=1000),
                    rng.gen_range(0..=1000),
                    rng.gen_range(0..=1000),
                )
                .unwrap(),
            )),
            _ => {
                let n = rng.gen_range(3..7);
                Some(
                    Location::polygon(
                        (0..n)
                            .map(|_| (rng.gen_range(0..=1000), rng.gen_range(0..=1000)))
                            .collect(),
                    )
                    .unwrap(),
                )
            }
        };
        GroundedSpan { text, location }
    }

    #[test]
    fn serialize_parse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..4);
            let spans: Vec<GroundedSpan> = (0..n).map(|_| random_span(&mut rng)).collect();
            let doc: String = spans
                .iter()
                .map(|s| serialize_grounded(s).unwrap())
                .collect();
            let back = parse_grounded(&doc).unwrap();
            assert_eq!(back, spans);
        }
    }

    #[test]
    fn prompt_templates_exact() {
        assert_eq!(
            build_prompt(PromptTask::ReadAllText, None).unwrap(),
            "Read all the text in the image."
        );
        assert_eq!(
            build_prompt(PromptTask::TextSpotting, None).unwrap(),
            "OCR with grounding:"
        );
        assert_eq!(
            build_prompt(PromptTask::OriginalTask, Some("What is the date?")).unwrap(),
            "What is the date?. Answer:"
        );
        assert_eq!(
            build_prompt(PromptTask::PositionOfText, None).unwrap(),
            "<ref>text</ref>"
        );
        assert_eq!(
            build_prompt(PromptTask::TextRecognition, None).unwrap(),
            "<ref>This</ref><box>(x1,y1),(x2,y2)</box> is"
        );
        assert_eq!(
            build_prompt(PromptTask::VqaGrounding, Some("Who signed it")).unwrap(),
            "Who signed it. Provide the location coordinates of the answer when answering the question."
        );
    }

    #[test]
    fn prompt_missing_question_rejected() {
        assert!(build_prompt(PromptTask::OriginalTask, None).is_err());
        assert!(build_prompt(PromptTask::VqaGrounding, None).is_err());
    }

    #[test]
    fn task_names_round_trip() {
        for name in PromptTask::ALL_NAMES {
            PromptTask::from_name(name).unwrap();
        }
        assert!(PromptTask::from_name("bogus").is_err());
    }

    #[test]
    fn span_record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let span = random_span(&mut rng);
            let rec = SpanRecord::from(&span);
            let json = serde_json::to_string(&rec).unwrap();
            let back: SpanRecord = serde_json::from_str(&json).unwrap();
            assert_eq!(GroundedSpan::try_from(&back).unwrap(), span);
        }
    }

    #[test]
    fn span_record_rejects_bad_kind() {
        let rec = SpanRecord {
            text: "x".into(),
            kind: "rect".into(),
            coords: vec![[1, 2]],
        };
        assert!(GroundedSpan::try_from(&rec).is_err());
    }
}
