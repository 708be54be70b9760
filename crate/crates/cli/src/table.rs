use clap::ValueEnum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// Space-aligned columns.
    Table,
    /// Tab-separated with a header row.
    Delimited,
}

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        assert_eq!(cells.len(), self.header.len(), "row width");
        self.rows.push(cells);
    }

    pub fn render(&self, format: Format) -> String {
        let lines = std::iter::once(&self.header).chain(&self.rows);
        match format {
            Format::Delimited => lines.map(|r| r.join("\t") + "\n").collect(),
            Format::Table => {
                let widths: Vec<usize> = (0..self.header.len())
                    .map(|c| {
                        lines
                            .clone()
                            .map(|r| r[c].chars().count())
                            .max()
                            .unwrap_or(0)
                    })
                    .collect();
                lines
                    .map(|r| {
                        let cells: Vec<String> = r
                            .iter()
                            .zip(&widths)
                            .map(|(s, &w)| format!("{s:<w$}"))
                            .collect();
                        cells.join("  ").trim_end().to_string() + "\n"
                    })
                    .collect()
            }
        }
    }
}
