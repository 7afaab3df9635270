//! Visual markers: the marker image and the index <-> centroid map.
//!
//! Each detection gets index `k` (1-based, detector order) anchored at the
//! mean of its mask pixels. A coordinate mentioned in a question reuses the
//! nearest existing index unless it is more than `d_th` pixels from every
//! centroid, in which case it gets the next free index. The marker image
//! blends a per-index color over each mask and stamps the index digits at
//! the centroid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::find_coords;
use crate::scene::{Detection, Image, Mask, Point, MAX_OBJECTS};

pub const DEFAULT_D_TH: f64 = 50.0;
pub const DEFAULT_OVERLAY_ALPHA: f64 = 0.5;
/// Each font pixel is drawn as a `GLYPH_SCALE x GLYPH_SCALE` block.
pub const GLYPH_SCALE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkerSource {
    Detection,
    Question,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerEntry {
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub source: MarkerSource,
    #[serde(default)]
    pub view: usize,
}

impl MarkerEntry {
    pub fn centroid(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerIndexMap {
    entries: Vec<MarkerEntry>,
    d_th: f64,
}

/// Emitted when a detector returns more objects than the marker cap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruncationWarning {
    pub received: usize,
    pub kept: usize,
}

pub fn compute_centroid(mask: &Mask) -> Result<Point> {
    let (mut sx, mut sy, mut n) = (0u64, 0u64, 0u64);
    for (x, y) in mask.points() {
        sx += x as u64;
        sy += y as u64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(Point::new(sx as f64 / n as f64, sy as f64 / n as f64))
}

/// Indexes detections 1..K in input order, capped at 100.
pub fn build_index_map(
    detections: &[Detection],
) -> Result<(MarkerIndexMap, Option<TruncationWarning>)> {
    if detections.is_empty() {
        return Err(Error::MarkerMismatch("no detections to index".into()));
    }
    let warning = (detections.len() > MAX_OBJECTS).then(|| {
        log::warn!(
            "{} detections exceed the cap; keeping the first {MAX_OBJECTS}",
            detections.len()
        );
        TruncationWarning {
            received: detections.len(),
            kept: MAX_OBJECTS,
        }
    });
    let mut entries = Vec::with_capacity(detections.len().min(MAX_OBJECTS));
    for (i, d) in detections.iter().take(MAX_OBJECTS).enumerate() {
        let c = compute_centroid(&d.mask)?;
        entries.push(MarkerEntry {
            index: i + 1,
            x: c.x,
            y: c.y,
            source: MarkerSource::Detection,
            view: d.view,
        });
    }
    Ok((
        MarkerIndexMap {
            entries,
            d_th: DEFAULT_D_TH,
        },
        warning,
    ))
}

impl MarkerIndexMap {
    /// An empty map; indices are added through question coordinates.
    pub fn empty(d_th: f64) -> Self {
        MarkerIndexMap {
            entries: Vec::new(),
            d_th,
        }
    }

    pub fn with_threshold(mut self, d_th: f64) -> Self {
        self.d_th = d_th;
        self
    }

    pub fn entries(&self) -> &[MarkerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn d_th(&self) -> f64 {
        self.d_th
    }

    pub fn detection_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.source == MarkerSource::Detection)
            .count()
    }

    pub fn index_to_coords(&self, k: usize) -> Result<Point> {
        if k == 0 || k > self.entries.len() {
            return Err(Error::UnknownMarker {
                index: k,
                len: self.entries.len(),
            });
        }
        Ok(self.entries[k - 1].centroid())
    }

    pub fn entry(&self, k: usize) -> Option<&MarkerEntry> {
        k.checked_sub(1).and_then(|i| self.entries.get(i))
    }

    /// Nearest entry in `view` within `d_th` (inclusive); ties go to the
    /// lowest index.
    pub fn nearest_within(&self, coord: Point, view: usize) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for e in self.entries.iter().filter(|e| e.view == view) {
            let d = e.centroid().dist(&coord);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, e.index));
            }
        }
        best.filter(|&(d, _)| d <= self.d_th).map(|(_, k)| k)
    }

    /// Resolves a question coordinate in the front view.
    pub fn assign_query_coordinate(
        &self,
        coord: Point,
        width: usize,
        height: usize,
    ) -> Result<(usize, MarkerIndexMap)> {
        self.assign_in_view(coord, 0, width, height)
    }

    pub fn assign_in_view(
        &self,
        coord: Point,
        view: usize,
        width: usize,
        height: usize,
    ) -> Result<(usize, MarkerIndexMap)> {
        if !(coord.x >= 0.0 && coord.x < width as f64 && coord.y >= 0.0 && coord.y < height as f64)
        {
            return Err(Error::OutOfBounds {
                x: coord.x,
                y: coord.y,
                width,
                height,
            });
        }
        if let Some(k) = self.nearest_within(coord, view) {
            return Ok((k, self.clone()));
        }
        let mut next = self.clone();
        let index = next.entries.len() + 1;
        next.entries.push(MarkerEntry {
            index,
            x: coord.x,
            y: coord.y,
            source: MarkerSource::Question,
            view,
        });
        Ok((index, next))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: MarkerIndexMap = serde_json::from_str(s)?;
        for (i, e) in map.entries.iter().enumerate() {
            if e.index != i + 1 {
                return Err(Error::MarkerMismatch(format!(
                    "entry {i} carries index {}",
                    e.index
                )));
            }
        }
        let first_question = map
            .entries
            .iter()
            .position(|e| e.source == MarkerSource::Question);
        if let Some(q) = first_question {
            if map.entries[q..]
                .iter()
                .any(|e| e.source == MarkerSource::Detection)
            {
                return Err(Error::MarkerMismatch(
                    "detection entry after question entry".into(),
                ));
            }
        }
        Ok(map)
    }
}

/// Marker token text for index `k`.
pub fn marker_token(k: usize) -> String {
    format!("<m{k}>")
}

/// Replaces every "(x,y)" in `text` that resolves to a front-view marker
/// with its marker token. Unresolved coordinates stay textual.
pub fn markerize_text(text: &str, map: &MarkerIndexMap) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (span, p) in find_coords(text) {
        if let Some(k) = map.nearest_within(p, 0) {
            out.push_str(&text[last..span.start]);
            out.push_str(&marker_token(k));
            last = span.end;
        }
    }
    out.push_str(&text[last..]);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerImage {
    pub image: Image,
    pub overlay_alpha: f64,
}

/// Fill color of the overlay for marker index `k`.
pub fn overlay_color(k: usize) -> [u8; 3] {
    const TABLE: [[u8; 3]; 16] = [
        [255, 0, 0],
        [0, 200, 0],
        [0, 90, 255],
        [255, 210, 0],
        [0, 220, 220],
        [230, 0, 230],
        [255, 120, 0],
        [140, 0, 255],
        [0, 140, 80],
        [200, 100, 120],
        [120, 200, 0],
        [0, 120, 160],
        [180, 60, 0],
        [90, 90, 255],
        [255, 90, 160],
        [60, 160, 200],
    ];
    TABLE[(k.max(1) - 1) % TABLE.len()]
}

/// 7x9 digit bitmaps, one string per row, `#` = set.
const DIGITS: [[&str; 9]; 10] = [
    [
        " ##### ", "##   ##", "##  ###", "## # ##", "### ###", "##   ##", "##   ##", "##   ##",
        " ##### ",
    ],
    [
        "   ##  ", "  ###  ", " ####  ", "   ##  ", "   ##  ", "   ##  ", "   ##  ", "   ##  ",
        " ######",
    ],
    [
        " ##### ", "##   ##", "     ##", "    ## ", "   ##  ", "  ##   ", " ##    ", "##     ",
        "#######",
    ],
    [
        " ##### ", "##   ##", "     ##", "     ##", "  #### ", "     ##", "     ##", "##   ##",
        " ##### ",
    ],
    [
        "    ## ", "   ### ", "  #### ", " ## ## ", "##  ## ", "#######", "    ## ", "    ## ",
        "    ## ",
    ],
    [
        "#######", "##     ", "##     ", "###### ", "     ##", "     ##", "     ##", "##   ##",
        " ##### ",
    ],
    [
        " ##### ", "##   ##", "##     ", "##     ", "###### ", "##   ##", "##   ##", "##   ##",
        " ##### ",
    ],
    [
        "#######", "     ##", "    ## ", "   ##  ", "  ##   ", "  ##   ", "  ##   ", "  ##   ",
        "  ##   ",
    ],
    [
        " ##### ", "##   ##", "##   ##", "##   ##", " ##### ", "##   ##", "##   ##", "##   ##",
        " ##### ",
    ],
    [
        " ##### ", "##   ##", "##   ##", "##   ##", " ######", "     ##", "     ##", "##   ##",
        " ##### ",
    ],
];
const GLYPH_W: usize = 7;
const GLYPH_H: usize = 9;

/// Pixel set of `text` (digits only) at the given scale, in a local frame.
fn glyph_bitmap(text: &str, scale: usize) -> (usize, usize, Vec<bool>) {
    let digits: Vec<usize> = text.bytes().map(|b| (b - b'0') as usize).collect();
    let cols = digits.len() * GLYPH_W + digits.len().saturating_sub(1);
    let (w, h) = (cols * scale, GLYPH_H * scale);
    let mut bits = vec![false; w * h];
    for (n, &d) in digits.iter().enumerate() {
        let x_off = n * (GLYPH_W + 1);
        for (row, line) in DIGITS[d].iter().enumerate() {
            for (col, ch) in line.bytes().enumerate() {
                if ch != b'#' {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        bits[(row * scale + dy) * w + (x_off + col) * scale + dx] = true;
                    }
                }
            }
        }
    }
    (w, h, bits)
}

/// Stamps `text` centered at `center`: white glyph pixels with a one-pixel
/// black outline, clipped at the image border.
pub fn stamp_text(image: &mut Image, text: &str, center: Point) {
    let (gw, gh, bits) = glyph_bitmap(text, GLYPH_SCALE);
    let x0 = center.x.round() as i64 - (gw / 2) as i64;
    let y0 = center.y.round() as i64 - (gh / 2) as i64;
    let is_set = |x: i64, y: i64| {
        x >= 0
            && y >= 0
            && (x as usize) < gw
            && (y as usize) < gh
            && bits[y as usize * gw + x as usize]
    };
    for ly in -1..=gh as i64 {
        for lx in -1..=gw as i64 {
            let (ix, iy) = (x0 + lx, y0 + ly);
            if ix < 0 || iy < 0 || ix as usize >= image.width || iy as usize >= image.height {
                continue;
            }
            let rgb = if is_set(lx, ly) {
                [255, 255, 255]
            } else if (-1..=1).any(|dy| (-1..=1).any(|dx| is_set(lx + dx, ly + dy))) {
                [0, 0, 0]
            } else {
                continue;
            };
            image.set(ix as usize, iy as usize, rgb);
        }
    }
}

/// `(1 - alpha) * orig + alpha * fill`, rounded to the nearest integer.
pub fn blend_channel(orig: u8, fill: u8, alpha: f64) -> u8 {
    ((1.0 - alpha) * orig as f64 + alpha * fill as f64)
        .round()
        .clamp(0.0, 255.0) as u8
}

/// Builds the marker image for one view: semi-transparent mask overlays for
/// detection entries, then index glyphs for every entry in that view.
pub fn render_marker_image(
    image: &Image,
    view: usize,
    map: &MarkerIndexMap,
    detections: &[Detection],
    overlay_alpha: f64,
) -> Result<MarkerImage> {
    if !(0.0..1.0).contains(&overlay_alpha) {
        return Err(Error::InvalidConfig(format!(
            "overlay alpha {overlay_alpha} outside [0, 1)"
        )));
    }
    let det_entries: Vec<&MarkerEntry> = map
        .entries
        .iter()
        .filter(|e| e.source == MarkerSource::Detection)
        .collect();
    if det_entries.len() != detections.len().min(MAX_OBJECTS) {
        return Err(Error::MarkerMismatch(format!(
            "{} detection entries for {} detections",
            det_entries.len(),
            detections.len()
        )));
    }
    let mut out = image.clone();
    for (entry, det) in det_entries.iter().zip(detections) {
        if entry.view != det.view {
            return Err(Error::MarkerMismatch(format!(
                "entry {} view differs from its detection",
                entry.index
            )));
        }
        if det.mask.width() != image.width || det.mask.height() != image.height {
            return Err(Error::MarkerMismatch(format!(
                "mask of entry {} has wrong size",
                entry.index
            )));
        }
        if det.view != view {
            continue;
        }
        let fill = overlay_color(entry.index);
        for (x, y) in det.mask.points() {
            let o = image.get(x, y);
            out.set(
                x,
                y,
                [
                    blend_channel(o[0], fill[0], overlay_alpha),
                    blend_channel(o[1], fill[1], overlay_alpha),
                    blend_channel(o[2], fill[2], overlay_alpha),
                ],
            );
        }
    }
    for e in map.entries.iter().filter(|e| e.view == view) {
        stamp_text(&mut out, &e.index.to_string(), e.centroid());
    }
    Ok(MarkerImage {
        image: out,
        overlay_alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ObjectClass;

    fn det(points: &[(usize, usize)], w: usize, h: usize) -> Detection {
        Detection {
            object_id: 0,
            class_label: ObjectClass::Car,
            view: 0,
            mask: Mask::from_points(w, h, points.iter().copied()),
        }
    }

    fn rect(x0: usize, x1: usize, y0: usize, y1: usize) -> Vec<(usize, usize)> {
        (y0..=y1)
            .flat_map(|y| (x0..=x1).map(move |x| (x, y)))
            .collect()
    }

    #[test]
    fn centroid_fixtures() {
        let m = Mask::from_points(20, 20, [(5, 7)]);
        assert_eq!(compute_centroid(&m).unwrap(), Point::new(5.0, 7.0));
        let m = Mask::from_points(4, 4, rect(0, 1, 0, 1));
        assert_eq!(compute_centroid(&m).unwrap(), Point::new(0.5, 0.5));
        let pts = rect(30, 39, 10, 19);
        // brute-force mean over the 100 pixels
        let bx = pts.iter().map(|p| p.0 as f64).sum::<f64>() / pts.len() as f64;
        let by = pts.iter().map(|p| p.1 as f64).sum::<f64>() / pts.len() as f64;
        assert_eq!((bx, by), (34.5, 14.5));
        let m = Mask::from_points(64, 64, pts);
        assert_eq!(compute_centroid(&m).unwrap(), Point::new(34.5, 14.5));
        assert!(matches!(
            compute_centroid(&Mask::new(3, 3)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn index_map_ordering_and_cap() {
        let dets: Vec<_> = (0..3).map(|i| det(&[(i * 10, 5)], 64, 64)).collect();
        let (map, warn) = build_index_map(&dets).unwrap();
        assert!(warn.is_none());
        assert_eq!(
            map.entries().iter().map(|e| e.index).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert_eq!(map.index_to_coords(2).unwrap(), Point::new(10.0, 5.0));

        let many: Vec<_> = (0..101)
            .map(|i| det(&[(i % 128, i / 128)], 128, 128))
            .collect();
        let (map, warn) = build_index_map(&many).unwrap();
        assert_eq!(map.len(), 100);
        assert_eq!(
            warn,
            Some(TruncationWarning {
                received: 101,
                kept: 100
            })
        );
    }

    #[test]
    fn index_lookup_bounds() {
        let (map, _) = build_index_map(&[det(&[(10, 20)], 64, 64)]).unwrap();
        assert_eq!(map.index_to_coords(1).unwrap(), Point::new(10.0, 20.0));
        assert!(matches!(
            map.index_to_coords(0),
            Err(Error::UnknownMarker { .. })
        ));
        assert!(map.index_to_coords(2).is_err());
    }

    fn four_entry_map() -> MarkerIndexMap {
        let dets = vec![
            det(&[(100, 100)], 448, 448),
            det(&[(300, 100)], 448, 448),
            det(&[(100, 300)], 448, 448),
            det(&[(300, 300)], 448, 448),
        ];
        build_index_map(&dets).unwrap().0
    }

    #[test]
    fn query_coordinate_rules() {
        let map = four_entry_map();
        let (k, same) = map
            .assign_query_coordinate(Point::new(300.0, 100.0), 448, 448)
            .unwrap();
        assert_eq!((k, &same), (2, &map));

        // (200, 200) is sqrt(2)*100 ~ 141 px from every centroid
        let (k, grown) = map
            .assign_query_coordinate(Point::new(200.0, 200.0), 448, 448)
            .unwrap();
        assert_eq!(k, 5);
        assert_eq!(grown.len(), 5);
        assert_eq!(grown.entries()[4].source, MarkerSource::Question);

        // 10 px from entry 3 (6, 8 offset), >50 from the rest
        let (k, same) = map
            .assign_query_coordinate(Point::new(106.0, 308.0), 448, 448)
            .unwrap();
        assert_eq!((k, same.len()), (3, 4));

        // exactly d_th away is not "more than" d_th
        let (k, same) = map
            .assign_query_coordinate(Point::new(150.0, 100.0), 448, 448)
            .unwrap();
        assert_eq!((k, same.len()), (1, 4));
        let (k, grown) = map
            .assign_query_coordinate(Point::new(150.01, 100.0), 448, 448)
            .unwrap();
        assert_eq!((k, grown.len()), (5, 5));

        assert!(matches!(
            map.assign_query_coordinate(Point::new(448.0, 0.0), 448, 448),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn query_assignment_is_idempotent() {
        let map = four_entry_map();
        let p = Point::new(200.0, 200.0);
        let (k1, m1) = map.assign_query_coordinate(p, 448, 448).unwrap();
        let (k2, m2) = m1.assign_query_coordinate(p, 448, 448).unwrap();
        assert_eq!(k1, k2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let map = four_entry_map().with_threshold(200.0);
        let (k, _) = map
            .assign_query_coordinate(Point::new(200.0, 100.0), 448, 448)
            .unwrap();
        assert_eq!(k, 1);
    }

    #[test]
    fn json_shape() {
        let map = four_entry_map();
        let v: serde_json::Value = serde_json::from_str(&map.to_json().unwrap()).unwrap();
        assert_eq!(v["d_th"], 50.0);
        assert_eq!(v["entries"][1]["index"], 2);
        assert_eq!(v["entries"][1]["x"], 300.0);
        assert_eq!(v["entries"][1]["source"], "detection");
        assert_eq!(
            MarkerIndexMap::from_json(&map.to_json().unwrap()).unwrap(),
            map
        );
    }

    #[test]
    fn blend_arithmetic() {
        assert_eq!(blend_channel(200, 100, 0.5), 150);
        assert_eq!(blend_channel(200, 100, 0.0), 200);
        let img = Image::filled(32, 32, [200, 200, 200]);
        let d = det(&rect(0, 31, 0, 31), 32, 32);
        let (map, _) = build_index_map(std::slice::from_ref(&d)).unwrap();
        let out = render_marker_image(&img, 0, &map, &[d], 0.5).unwrap();
        let fill = overlay_color(1);
        assert_eq!(
            out.image.get(0, 0),
            [
                blend_channel(200, fill[0], 0.5),
                blend_channel(200, fill[1], 0.5),
                blend_channel(200, fill[2], 0.5)
            ]
        );
        assert_eq!(out.image.get(0, 0)[0], 228); // 0.5*200 + 0.5*255 = 227.5 -> 228
    }

    #[test]
    fn zero_alpha_only_changes_glyph_pixels() {
        let img = Image::filled(64, 64, [90, 90, 90]);
        let d = det(&rect(10, 50, 10, 50), 64, 64);
        let (map, _) = build_index_map(std::slice::from_ref(&d)).unwrap();
        let out = render_marker_image(&img, 0, &map, &[d], 0.0).unwrap();
        let mut glyph_only = img.clone();
        stamp_text(&mut glyph_only, "1", map.index_to_coords(1).unwrap());
        assert_eq!(out.image, glyph_only);
    }

    #[test]
    fn question_only_map_stamps_digits() {
        let img = Image::filled(64, 64, [0, 0, 128]);
        let (_, map) = MarkerIndexMap::empty(DEFAULT_D_TH)
            .assign_query_coordinate(Point::new(30.0, 30.0), 64, 64)
            .unwrap();
        let out = render_marker_image(&img, 0, &map, &[], 0.5).unwrap();
        let mut expected = img.clone();
        stamp_text(&mut expected, "1", Point::new(30.0, 30.0));
        assert_eq!(out.image, expected);
        assert_ne!(out.image, img);
        // the glyph stays local to the centroid
        assert_eq!(out.image.get(0, 0), [0, 0, 128]);
    }

    #[test]
    fn render_rejects_mismatch() {
        let img = Image::filled(32, 32, [0, 0, 0]);
        let d = det(&[(3, 3)], 32, 32);
        let (map, _) = build_index_map(std::slice::from_ref(&d)).unwrap();
        assert!(render_marker_image(&img, 0, &map, &[d.clone(), d], 0.5).is_err());
    }

    #[test]
    fn glyph_multi_digit_width() {
        let (w, h, bits) = glyph_bitmap("12", 1);
        assert_eq!((w, h), (15, 9));
        assert!(bits.iter().any(|&b| b));
        // column 7 is the inter-digit gap
        assert!((0..9).all(|r| !bits[r * 15 + 7]));
    }

    #[test]
    fn markerize_replaces_resolved_coordinates() {
        let map = four_entry_map();
        let t = markerize_text("The red car is at (300.0,100.0). far (200.0,200.0)", &map);
        assert_eq!(t, "The red car is at <m2>. far (200.0,200.0)");
    }
}
