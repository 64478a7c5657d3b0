"""Instruction pools for brief and detailed description questions."""

BRIEF_INSTRUCTIONS = (
    'Summarize the 3D point cloud object briefly.',
    'What kind of object is depicted by this point cloud?',
    'Provide a short explanation of this 3D structure.',
    'What does this collection of points represent?',
    'Offer a succinct summary of this 3D object.',
    'Can you give a brief overview of this point cloud?',
    'Characterize the object this point cloud is illustrating.',
    'Share a brief interpretation of this 3D point cloud.',
    "Provide an outline of this 3D shape's characteristics.",
    'What object is this point cloud rendering?',
    'Deliver a quick description of the object represented here.',
    'How would you describe the 3D form shown in this point cloud?',
    'What is the nature of the object this point cloud is representing?',
    "Present a compact account of this 3D object's key features.",
    'What can you infer about the object from this point cloud?',
    'Offer a clear and concise description of this point cloud object.',
    'How would you summarize this 3D data set?',
    'Give a brief explanation of the object that this cloud of points forms.',
    'What kind of structure does this 3D point cloud depict?',
    'Could you delineate the form indicated by this point cloud?',
    'Express in brief, what this point cloud is representing.',
    'Give a quick overview of the object represented by this 3D cloud.',
    'Convey a summary of the 3D structure represented in this point cloud.',
    'What kind of object is illustrated by this collection of points?',
    'Describe the object that this point cloud forms.',
    'How would you interpret this 3D point cloud?',
    'Can you briefly outline the shape represented by these points?',
    'Give a concise interpretation of the 3D data presented here.',
    'Explain the object this point cloud depicts succinctly.',
    'Offer a summary of the 3D object illustrated by this cloud.',
)

DETAIL_INSTRUCTIONS = (
    'Can you tell me more about this?',
    'What does this represent?',
    'Can you describe this in more detail?',
    "I'm interested in this, can you explain?",
    'What is this object made of?',
    'Could you provide more info about this?',
    'What exactly am I looking at here?',
    'What is this?',
    'Could you describe the detailed structure of this?',
    'This looks interesting, can you expand on it?',
    'Can you explain more about this form?',
    'What can you tell me about the shape of this object?',
    'Could you delve deeper into this?',
    'I want to know more about this, can you help?',
    'Can you walk me through the details of this object?',
    'Can you provide a comprehensive account of this object?',
    'Offer a detailed interpretation of this point cloud.',
    'Please elucidate on the characteristics of this form.',
    'Could you provide an in-depth description of this structure?',
    'What does this cloud represent in its entirety?',
    'Elaborate on the details of this point cloud, please.',
    'Kindly furnish me with more information about this object.',
    'Please expand on the intricate structure of this form.',
    'Provide a meticulous explanation of what these points represent.',
    'I request a detailed breakdown of this structure.',
    'Give a thorough rundown of this point cloud.',
    'Can you offer a complete analysis of this object?',
    'I would like a comprehensive explanation of this form.',
    'Please detail the specific features of this point cloud.',
    'Could you elaborate extensively on what this represents?',
)
