//! SVG output: occupancy with motion arrows, or a per-cell reliability map.

use std::fmt::Write as _;

use motionssl_core::container::Container;
use motionssl_core::{BevMap, Cell, MotionField};

use crate::{CliError, RenderArgs, RenderKind};

fn occupancy(c: &Container) -> Result<Option<BevMap>, CliError> {
    if c.get("occupancy").is_some() {
        return Ok(Some(c.sequence("occupancy")?.current().clone()));
    }
    if c.get("current").is_some() {
        return Ok(Some(c.map("current")?));
    }
    Ok(None)
}

fn motion(c: &Container, name: Option<&str>) -> Result<Option<MotionField>, CliError> {
    let name = match name {
        Some(n) => Some(n),
        None => ["labels", "motion"].into_iter().find(|n| c.get(n).is_some()),
    };
    Ok(name.map(|n| c.motion(n)).transpose()?)
}

/// Green at zero through red at `2 * mu` and beyond.
fn heat(delta: f64, mu: f64) -> String {
    if !delta.is_finite() {
        return "#600000".into();
    }
    let t = (delta / (2.0 * mu)).clamp(0.0, 1.0);
    let r = (255.0 * t).round() as u8;
    let g = (200.0 * (1.0 - t)).round() as u8;
    format!("#{r:02x}{g:02x}30")
}

pub(crate) fn render(args: &RenderArgs) -> Result<(), CliError> {
    let c = Container::read(&args.input)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.input.display())))?;
    if !(args.scale > 0.0) {
        return Err(CliError::Usage("--scale must be positive".into()));
    }
    let occ = occupancy(&c)?;
    let field = motion(&c, args.motion.as_deref())?;
    let (rows, cols) = match (&occ, &field, c.get("delta")) {
        (Some(m), _, _) => (m.rows(), m.cols()),
        (None, Some(f), _) => (f.rows(), f.cols()),
        (None, None, Some(d)) if d.shape().len() == 2 => (d.shape()[0], d.shape()[1]),
        _ => return Err(CliError::Data("nothing to render: no occupancy, motion or delta".into())),
    };
    let s = args.scale;
    // Rows run along X, drawn top to bottom; columns along Y, left to right.
    let (width, height) = (cols as f64 * s, rows as f64 * s);
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##).unwrap();

    match args.kind {
        RenderKind::Quiver => {
            if let Some(m) = &occ {
                for r in 0..rows {
                    for col in 0..cols {
                        if m.is_occupied(Cell::new(r, col)) {
                            writeln!(
                                svg,
                                r##"<rect x="{}" y="{}" width="{s}" height="{s}" fill="#c8c8c8"/>"##,
                                col as f64 * s,
                                r as f64 * s
                            )
                            .unwrap();
                        }
                    }
                }
            }
            let field = field.ok_or_else(|| CliError::Data("no motion field to draw".into()))?;
            if field.rows() != rows || field.cols() != cols {
                return Err(CliError::Data("motion field does not match occupancy grid".into()));
            }
            for cell in field.valid_cells() {
                let d = field.get(cell);
                if d == [0.0, 0.0] {
                    continue;
                }
                let (x0, y0) = ((cell.col as f64 + 0.5) * s, (cell.row as f64 + 0.5) * s);
                let (x1, y1) = (x0 + d[1] * s, y0 + d[0] * s);
                writeln!(
                    svg,
                    r##"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="#1f4fbf" stroke-width="1"/><circle cx="{x1:.2}" cy="{y1:.2}" r="1.2" fill="#1f4fbf"/>"##
                )
                .unwrap();
            }
        }
        RenderKind::Reliability => {
            let delta = c.require("delta")?;
            if delta.shape() != [rows, cols] {
                return Err(CliError::Data(format!(
                    "delta shape {:?} does not match grid {rows}x{cols}",
                    delta.shape()
                )));
            }
            let mu = c.meta("mu").and_then(|v| v.as_f64()).unwrap_or(1.0);
            for (i, &d) in delta.as_f32()?.iter().enumerate() {
                if d.is_nan() {
                    continue;
                }
                writeln!(
                    svg,
                    r#"<rect x="{}" y="{}" width="{s}" height="{s}" fill="{}"/>"#,
                    (i % cols) as f64 * s,
                    (i / cols) as f64 * s,
                    heat(d as f64, mu)
                )
                .unwrap();
            }
        }
    }
    svg.push_str("</svg>\n");
    std::fs::write(&args.out, svg).map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))
}
