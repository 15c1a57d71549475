class ContractViolation(ValueError):
    """An operation was called with inputs outside its contract."""
