//! Column-tagged CSV for desk-scale bundles.
//!
//! Header columns: `x0..`, optional `psi0..`, then `g` (regression) or
//! `g0..` (classification logits), `y`, optional `split`. Lines starting
//! with `#` are ignored. Floats are written in shortest round-trip form.

use crate::error::{Error, Result};
use crate::fmgp::Mode;
use crate::io::bundle::{PredictionBundle, Split, Targets};
use crate::numkit::Mat;

pub fn export_csv(b: &PredictionBundle) -> Result<String> {
    b.validate()?;
    let mut header: Vec<String> = (0..b.x.cols()).map(|j| format!("x{j}")).collect();
    if let Some(p) = &b.psi {
        header.extend((0..p.cols()).map(|j| format!("psi{j}")));
    }
    match b.mode {
        Mode::Regression => header.push("g".into()),
        Mode::Classification => header.extend((0..b.g.cols()).map(|j| format!("g{j}"))),
    }
    header.push("y".into());
    if b.split.is_some() {
        header.push("split".into());
    }
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..b.len() {
        let mut fields: Vec<String> = b.x.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(p) = &b.psi {
            fields.extend(p.row(i).iter().map(|v| v.to_string()));
        }
        fields.extend(b.g.row(i).iter().map(|v| v.to_string()));
        fields.push(match &b.y {
            Targets::Real(v) => v[i].to_string(),
            Targets::Class(v) => v[i].to_string(),
        });
        if let Some(s) = &b.split {
            fields.push(s[i].as_str().to_string());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq)]
enum Col {
    X,
    Psi,
    G,
    Y,
    Split,
}

fn tag(name: &str) -> Result<Col> {
    let indexed = |prefix: &str| {
        name.strip_prefix(prefix)
            .is_some_and(|r| !r.is_empty() && r.bytes().all(|b| b.is_ascii_digit()))
    };
    if indexed("x") {
        Ok(Col::X)
    } else if indexed("psi") {
        Ok(Col::Psi)
    } else if name == "g" || indexed("g") {
        Ok(Col::G)
    } else if name == "y" {
        Ok(Col::Y)
    } else if name == "split" {
        Ok(Col::Split)
    } else {
        Err(Error::Format(format!("unknown CSV column `{name}`")))
    }
}

pub fn import_csv(text: &str) -> Result<PredictionBundle> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or(Error::EmptyInput("CSV without header"))?
        .split(',')
        .map(str::trim)
        .collect();
    let tags: Vec<Col> = header.iter().map(|h| tag(h)).collect::<Result<_>>()?;
    let count = |c: Col| tags.iter().filter(|&&t| t == c).count();
    if count(Col::Y) != 1 || count(Col::G) == 0 || count(Col::X) == 0 {
        return Err(Error::Format("CSV needs x columns, g column(s) and one y column".into()));
    }
    let mode = if header.contains(&"g") {
        if count(Col::G) != 1 {
            return Err(Error::Format("mix of `g` and indexed g columns".into()));
        }
        Mode::Regression
    } else {
        Mode::Classification
    };
    let (dx, dp, dg) = (count(Col::X), count(Col::Psi), count(Col::G));
    let (mut x, mut psi, mut g) = (Vec::new(), Vec::new(), Vec::new());
    let mut y_real = Vec::new();
    let mut y_class = Vec::new();
    let mut split = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != tags.len() {
            return Err(Error::Shape(format!(
                "CSV row {} has {} fields, header has {}",
                lineno + 1,
                fields.len(),
                tags.len()
            )));
        }
        for (f, &t) in fields.iter().zip(&tags) {
            let num = || {
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number `{f}` in CSV row {}", lineno + 1)))
            };
            match t {
                Col::X => x.push(num()?),
                Col::Psi => psi.push(num()?),
                Col::G => g.push(num()?),
                Col::Y => match mode {
                    Mode::Regression => y_real.push(num()?),
                    Mode::Classification => y_class.push(f.parse::<usize>().map_err(|_| {
                        Error::Format(format!("bad class label `{f}` in CSV row {}", lineno + 1))
                    })?),
                },
                Col::Split => split.push(Split::parse(f)?),
            }
        }
    }
    let n = x.len() / dx;
    let b = PredictionBundle {
        mode,
        x: Mat::from_vec(n, dx, x)?,
        g: Mat::from_vec(n, dg, g)?,
        y: match mode {
            Mode::Regression => Targets::Real(y_real),
            Mode::Classification => Targets::Class(y_class),
        },
        psi: if dp > 0 {
            Some(Mat::from_vec(n, dp, psi)?)
        } else {
            None
        },
        split: if count(Col::Split) > 0 { Some(split) } else { None },
        seed: None,
    };
    b.validate()?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::bundle::tests::random_bundle;

    #[test]
    fn export_import_round_trip() {
        for mode in [Mode::Regression, Mode::Classification] {
            let mut b = random_bundle(9, mode);
            b.seed = None;
            let back = import_csv(&export_csv(&b).unwrap()).unwrap();
            assert_eq!(back, b);
        }
    }

    #[test]
    fn rejects_unknown_columns_and_ragged_rows() {
        assert!(import_csv("x0,g,y,bogus\n1,2,3,4\n").is_err());
        assert!(matches!(import_csv("x0,g,y\n1,2\n"), Err(Error::Shape(_))));
        let b = import_csv("# desk data\nx0,g,y\n0.5,1.0,1.25\n").unwrap();
        assert_eq!(b.mode, Mode::Regression);
        assert_eq!(b.y.real().unwrap(), &[1.25]);
    }
}
