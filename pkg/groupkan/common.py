"""Common config for all schemas"""

import pydantic


class BaseModel(pydantic.BaseModel):
    """BaseModel for all config and record schemas to inherit from."""

    class Config:
        # Strip whitespace from str values by default.
        # Ids and paths read from INI files often carry trailing spaces.
        anystr_strip_whitespace = True

        # Fail if an attribute that doesn't exist is added.
        # This will help reduce typos in config files.
        extra = "forbid"

        # Validate when setting attributes.
        # This will help trigger errors right where they occur.
        validate_assignment = True

        # Store enums as string values.
        # This helps so people can use either strings or enums.
        use_enum_values = True


class ArrayModel(BaseModel):
    """BaseModel for records that carry numpy arrays."""

    class Config:
        arbitrary_types_allowed = True
