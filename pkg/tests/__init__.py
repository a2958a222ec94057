# Tests package for trusfuse
