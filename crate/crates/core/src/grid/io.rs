use sha2::{Digest, Sha256};

use super::{GridCase, GridError};

/// Serialize to the native JSON schema.
pub fn export_grid(grid: &GridCase) -> String {
    serde_json::to_string_pretty(grid).expect("grid serialization cannot fail")
}

/// Parse and validate the native JSON schema.
pub fn load_grid(text: &str) -> Result<GridCase, GridError> {
    let grid: GridCase = serde_json::from_str(text).map_err(|e| GridError::Validation {
        path: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    grid.validate()?;
    Ok(grid)
}

/// Hex SHA-256 of the canonical export.
pub fn grid_hash(grid: &GridCase) -> String {
    hex::encode(Sha256::digest(export_grid(grid).as_bytes()))
}
