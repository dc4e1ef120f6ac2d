def export(fmt):
    if fmt == "csv":
        return "ok"
    return "not implemented"
