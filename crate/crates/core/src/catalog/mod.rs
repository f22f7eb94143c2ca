//! Tables, projections, and the design catalog.
//!
//! A table is a logical schema plus an optional partition expression. All
//! physical storage belongs to *projections*: sorted, segmented, per-column
//! materializations of a subset of the table's columns. Every table keeps at
//! least one super projection (all columns); other projections are optimized
//! copies the planner may choose instead.
//!
//! Partitioning is declared at table level, so every projection of a table
//! splits its containers on identical partition-key sets.

pub mod log;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoding::EncodingType;
use crate::error::{Error, Result};
use crate::expr::{infer_type, Expr, UNRESOLVED};
use crate::value::{DataType, Value};

/// Epochs are the unit of commit time: a 64-bit counter that advances on
/// every data-modifying commit.
pub type Epoch = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub dtype: DataType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnDef>,
    /// Expression over this table's columns; rows with equal keys share a
    /// partition. `None` means a single implicit partition.
    pub partition_expr: Option<Expr>,
}

impl TableSchema {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column_types(&self) -> Vec<DataType> {
        self.columns.iter().map(|c| c.dtype).collect()
    }

    /// Partition key for a full table row. Unpartitioned tables map
    /// everything to key 0.
    pub fn partition_key(&self, row: &[Value]) -> Result<Value> {
        match &self.partition_expr {
            None => Ok(Value::Int(0)),
            Some(e) => {
                let mut warnings = 0;
                e.eval(row, &mut warnings)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Segmentation {
    /// Full copy on every node.
    Replicated,
    /// Rows placed by an expression over the projection's columns, evaluated
    /// into the unsigned 64-bit ring.
    SegmentedBy(Expr),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionDef {
    pub name: String,
    pub anchor_table: String,
    /// Subset of the anchor table's columns, in projection column order.
    pub columns: Vec<String>,
    /// Non-empty prefix-usable sort order; names must appear in `columns`.
    pub sort_order: Vec<String>,
    pub segmentation: Segmentation,
    /// Parallel to `columns`. AUTO resolves at seal time.
    pub encodings: Vec<EncodingType>,
    pub is_super: bool,
    /// Ring rotation distance for buddy copies; the j-th buddy of the copy
    /// on node n lives on node (n + j*buddy_offset) mod N.
    pub buddy_offset: u32,
    /// Set when the projection was created after its table already had data;
    /// cleared by refresh.
    pub needs_refresh: bool,
}

impl ProjectionDef {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Sort order as indexes into the projection's own column list.
    pub fn sort_indexes(&self) -> Vec<usize> {
        self.sort_order
            .iter()
            .map(|s| self.column_index(s).expect("validated sort column"))
            .collect()
    }

    /// Projection column types, resolved against the anchor table.
    pub fn column_types(&self, table: &TableSchema) -> Vec<DataType> {
        self.columns
            .iter()
            .map(|c| table.columns[table.column_index(c).expect("validated column")].dtype)
            .collect()
    }

    /// Indexes of the projection's columns within the anchor table row.
    pub fn table_indexes(&self, table: &TableSchema) -> Vec<usize> {
        self.columns
            .iter()
            .map(|c| table.column_index(c).expect("validated column"))
            .collect()
    }

    pub fn is_segmented(&self) -> bool {
        matches!(self.segmentation, Segmentation::SegmentedBy(_))
    }
}

/// The full metadata state: schemas plus the epoch counters that define
/// visibility and recoverability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignCatalog {
    pub tables: BTreeMap<String, TableSchema>,
    pub projections: BTreeMap<String, ProjectionDef>,
    /// Latest committed epoch; new commits stamp current_epoch + 1.
    pub current_epoch: Epoch,
    /// Ancient history mark: no state older than this is reconstructible.
    pub ahm: Epoch,
    /// Last good epoch per (projection, node): everything at or below it is
    /// safely in ROS on that node.
    pub lge: BTreeMap<(String, usize), Epoch>,
}

impl DesignCatalog {
    pub fn new() -> Self {
        DesignCatalog {
            tables: BTreeMap::new(),
            projections: BTreeMap::new(),
            current_epoch: 0,
            ahm: 0,
            lge: BTreeMap::new(),
        }
    }

    pub fn table(&self, name: &str) -> Result<&TableSchema> {
        self.tables
            .get(name)
            .ok_or_else(|| Error::Catalog(format!("unknown table {name}")))
    }

    pub fn projection(&self, name: &str) -> Result<&ProjectionDef> {
        self.projections
            .get(name)
            .ok_or_else(|| Error::Catalog(format!("unknown projection {name}")))
    }

    pub fn table_projections(&self, table: &str) -> Vec<&ProjectionDef> {
        self.projections
            .values()
            .filter(|p| p.anchor_table == table)
            .collect()
    }

    pub fn create_table(&mut self, mut schema: TableSchema) -> Result<()> {
        if self.tables.contains_key(&schema.name) {
            return Err(Error::Catalog(format!("table {} already exists", schema.name)));
        }
        if schema.columns.is_empty() {
            return Err(Error::Catalog("table needs at least one column".into()));
        }
        for (i, c) in schema.columns.iter().enumerate() {
            if schema.columns[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Catalog(format!("duplicate column {}", c.name)));
            }
        }
        let types = schema.column_types();
        if let Some(expr) = &mut schema.partition_expr {
            resolve_columns(expr, &schema.columns)?;
            infer_type(expr, &types)?;
        }
        self.tables.insert(schema.name.clone(), schema);
        Ok(())
    }

    /// Validates and registers a projection. `table_has_data` marks the new
    /// projection as needing refresh. All checks run before any mutation, so
    /// a failed call leaves the catalog untouched.
    pub fn create_projection(&mut self, mut def: ProjectionDef, table_has_data: bool) -> Result<()> {
        if self.projections.contains_key(&def.name) {
            return Err(Error::Catalog(format!("projection {} already exists", def.name)));
        }
        let table = self.table(&def.anchor_table)?.clone();
        if def.columns.is_empty() {
            return Err(Error::Catalog("projection needs at least one column".into()));
        }
        for (i, c) in def.columns.iter().enumerate() {
            if table.column_index(c).is_none() {
                return Err(Error::Catalog(format!("unknown column {c}")));
            }
            if def.columns[..i].contains(c) {
                return Err(Error::Catalog(format!("duplicate projection column {c}")));
            }
        }
        let covers_all = table.columns.iter().all(|c| def.columns.contains(&c.name));
        if def.is_super && !covers_all {
            return Err(Error::Catalog(format!(
                "super projection {} must contain every column of {}",
                def.name, def.anchor_table
            )));
        }
        if !def.is_super && covers_all {
            def.is_super = true; // covering all columns makes it super by definition
        }
        let existing = self.table_projections(&def.anchor_table);
        if existing.is_empty() && !def.is_super {
            return Err(Error::Catalog(format!(
                "first projection of {} must be a super projection",
                def.anchor_table
            )));
        }
        if def.sort_order.is_empty() {
            return Err(Error::Catalog("sort order must not be empty".into()));
        }
        for s in &def.sort_order {
            if def.column_index(s).is_none() {
                return Err(Error::Catalog(format!("sort column {s} not in projection")));
            }
        }
        if def.encodings.is_empty() {
            def.encodings = vec![EncodingType::Auto; def.columns.len()];
        }
        if def.encodings.len() != def.columns.len() {
            return Err(Error::Catalog("one encoding per projection column".into()));
        }
        let types = def.column_types(&table);
        for (i, enc) in def.encodings.iter().enumerate() {
            if !enc.applicable_to(types[i]) {
                return Err(Error::Catalog(format!(
                    "encoding {} not applicable to column {} ({})",
                    enc.name(),
                    def.columns[i],
                    types[i]
                )));
            }
        }
        if def.buddy_offset == 0 {
            return Err(Error::Catalog("buddy_offset must be at least 1".into()));
        }
        if let Segmentation::SegmentedBy(expr) = &mut def.segmentation {
            let cols: Vec<ColumnDef> = def
                .columns
                .iter()
                .map(|c| ColumnDef {
                    name: c.clone(),
                    dtype: types[def.columns.iter().position(|x| x == c).unwrap()],
                })
                .collect();
            resolve_columns(expr, &cols)?;
            let t = infer_type(expr, &types)?;
            match t {
                Some(DataType::Int64) | Some(DataType::Timestamp) | None => {}
                Some(other) => {
                    return Err(Error::Catalog(format!(
                        "segmentation expression must be integral, got {other}"
                    )))
                }
            }
        }
        def.needs_refresh = table_has_data;
        self.projections.insert(def.name.clone(), def);
        Ok(())
    }

    pub fn drop_projection(&mut self, name: &str) -> Result<ProjectionDef> {
        let def = self.projection(name)?.clone();
        if def.is_super {
            let supers = self
                .table_projections(&def.anchor_table)
                .iter()
                .filter(|p| p.is_super)
                .count();
            if supers <= 1 {
                return Err(Error::Catalog(format!(
                    "cannot drop {}: last super projection of {}",
                    name, def.anchor_table
                )));
            }
        }
        Ok(self.projections.remove(name).unwrap())
    }

    /// Adds a column with NULL contents to a table and to each of its super
    /// projections (which must keep covering every column).
    pub fn add_column(&mut self, table: &str, col: ColumnDef) -> Result<()> {
        let schema = self
            .tables
            .get_mut(table)
            .ok_or_else(|| Error::Catalog(format!("unknown table {table}")))?;
        if schema.column_index(&col.name).is_some() {
            return Err(Error::Catalog(format!("duplicate column {}", col.name)));
        }
        schema.columns.push(col.clone());
        for def in self.projections.values_mut() {
            if def.anchor_table == table && def.is_super {
                def.columns.push(col.name.clone());
                def.encodings.push(EncodingType::Auto);
            }
        }
        Ok(())
    }

    /// Global low-water mark of last good epochs across nodes that hold each
    /// projection. `nodes` restricts the aggregation to nodes actually
    /// hosting data (all of them, in this engine's layout).
    pub fn min_lge(&self) -> Option<Epoch> {
        self.lge.values().copied().min()
    }
}

impl Default for DesignCatalog {
    fn default() -> Self {
        Self::new()
    }
}

/// Resolves column references in an expression against an ordered column
/// list, filling in indexes.
pub fn resolve_columns(expr: &mut Expr, columns: &[ColumnDef]) -> Result<()> {
    match expr {
        Expr::Column { name, index } => {
            match columns.iter().position(|c| &c.name == name) {
                Some(i) => {
                    *index = i;
                    Ok(())
                }
                None => Err(Error::Catalog(format!("unknown column {name}"))),
            }
        }
        Expr::Literal(_) => Ok(()),
        Expr::Unary { expr, .. } => resolve_columns(expr, columns),
        Expr::Binary { left, right, .. } => {
            resolve_columns(left, columns)?;
            resolve_columns(right, columns)
        }
        Expr::Func { args, .. } => {
            for a in args {
                resolve_columns(a, columns)?;
            }
            Ok(())
        }
        Expr::IsNull { expr, .. } => resolve_columns(expr, columns),
        Expr::InList { expr, list, .. } => {
            resolve_columns(expr, columns)?;
            for e in list {
                resolve_columns(e, columns)?;
            }
            Ok(())
        }
    }
}

/// True when the expression still contains unresolved column references.
pub fn has_unresolved(expr: &Expr) -> bool {
    let mut cols = Vec::new();
    expr.columns(&mut cols);
    cols.iter().any(|&i| i == UNRESOLVED)
}
