"""Service layer package."""



